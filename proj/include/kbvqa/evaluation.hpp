#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbvqa/dataset.hpp"
#include "kbvqa/reasoner.hpp"

namespace kbvqa {

class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Prediction {
  std::string id;
  std::string answer;
};

struct Cell {
  std::size_t correct = 0;
  std::size_t n = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

struct EvalReport {
  Cell overall;
  std::array<Cell, 7> qtype;
  std::array<Cell, 2> hop;  // 1hop, 2hop
  std::array<Cell, 2> kb;   // kb, nokb
  std::map<std::string, std::string> metadata;
};

// Lowercase and strip surrounding whitespace/punctuation; both sides of a comparison pass through it.
std::string normalize_answer(const std::string& s);

// Predictions are matched to records by id; a missing, extra or duplicated id is an AlignmentError.
EvalReport score(const std::vector<Prediction>& predictions, const std::vector<QARecord>& records,
                 std::map<std::string, std::string> metadata = {});

struct AblationConfig {
  std::string label;
  SourceMode kb;
  SourceMode sg;
};

// none, kb_ret, sg_ret, kb_ret+sg_ret, kb_gt, sg_gt, kb_gt+sg_gt, in that order.
const std::vector<AblationConfig>& ablation_configs();

enum class Branch { Reasoner, LlmMock, LlmLive };
std::string_view branch_name(Branch b);
Branch parse_branch(std::string_view s);

struct GridEntry {
  std::string config;
  bool present = false;
  double accuracy = 0.0;
  std::size_t n = 0;
  std::optional<EvalReport> report;
};

struct AblationGrid {
  Branch branch = Branch::Reasoner;
  std::vector<GridEntry> entries;  // ablation_configs() order

  const GridEntry& at(const std::string& label) const;
};

// `predict_config` returns nullopt when a component the configuration needs is missing;
// that cell is marked absent.
AblationGrid run_ablation(const std::vector<QARecord>& records, Branch branch,
                          const std::function<std::optional<std::vector<Prediction>>(const AblationConfig&)>&
                              predict_config);

enum class ReportFormat { Csv, Markdown };

// qtype,accuracy,n. Cells with n = 0 are omitted.
void emit_qtype(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);
// split,accuracy,n with split in 1hop, 2hop, kb, nokb.
void emit_split(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);
// config,branch,accuracy,n. Absent cells are omitted.
void emit_grid(const AblationGrid& grid, const std::filesystem::path& path, ReportFormat format);

}  // namespace kbvqa
