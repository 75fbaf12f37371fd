#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbvqa/dataset.hpp"
#include "kbvqa/llm_pipeline.hpp"
#include "kbvqa/reasoner.hpp"
#include "kbvqa/retriever.hpp"

namespace kbvqa {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;

  WorldSpec world;
  int questions_per_image = 8;
  std::array<double, 3> split{0.6, 0.2, 0.2};

  std::size_t d_base = 256;
  std::size_t hidden = 256;
  std::size_t dim = 128;

  RetrieverConfig retriever;
  std::size_t retriever_k = 10;
  int kb_hops = 2;
  std::vector<std::size_t> eval_ks{1, 5, 10, 100};

  ReasonerConfig reasoner;

  std::size_t n_shots = 32;
  LlmEndpoint endpoint;
  bool transcript = false;

  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";

  // Keys are "section.name" (or "seed"). Unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;

  // INI-style: [section] headers, key = value, '#' or ';' comments.
  void load_file(const std::filesystem::path& path);

  // Canonical "key = value" lines for the given sections ("" = every key).
  std::string canonical(const std::vector<std::string>& sections = {}) const;

  // Content hashes used as artifact directory names.
  std::string data_hash() const;
  std::string retriever_hash() const;
  std::string reasoner_hash() const;

  std::filesystem::path data_path() const { return data_dir / data_hash(); }
  std::filesystem::path retriever_path() const { return checkpoint_dir / retriever_hash(); }
  std::filesystem::path reasoner_path() const { return checkpoint_dir / reasoner_hash(); }
  std::filesystem::path report_path() const { return report_dir / reasoner_hash(); }
};

struct ConfigKey {
  std::string name;
  std::string help;
};

// Every recognised key in canonical order.
const std::vector<ConfigKey>& config_keys();

}  // namespace kbvqa
