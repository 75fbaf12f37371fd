#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kbvqa/knowledge_store.hpp"

namespace kbvqa {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QARecord {
  std::string id;
  std::string image_id;
  std::string question;
  std::string answer;
  int qtype = 0;
  int hops = 1;
  bool kb_related = false;
  std::string caption;
  std::vector<TripletText> reason_sg;
  std::vector<TripletText> reason_kb;

  bool operator==(const QARecord&) const = default;
};

// Reason triplets in chain order: (A,R1,B),(B,R2,C) for 2-hop records.
std::vector<TripletText> reason_chain(const QARecord& r);

// Question text and answer for a template applied to a chain.
std::pair<std::string, std::string> instantiate_template(int qtype,
                                                         const std::vector<TripletText>& chain);

// Throws ValidationError naming the record id.
void validate_record(const QARecord& r);

struct WorldSpec {
  std::uint64_t seed = 7;
  int n_images = 1500;
  int sg_entities_per_image = 6;
  int sg_triplets_per_image = 8;
  int n_objects = 300;  // visual vocabulary shared by scene graphs and KB
  int sg_relations = 16;
  int kb_entities = 600;  // KB-only concepts
  int kb_relations = 30;
  int kb_triplets = 3000;
  double object_head_fraction = 0.8;
  double object_tail_fraction = 0.1;
  double kb_question_fraction = 0.3;

  void validate() const;
};

struct World {
  WorldSpec spec;
  KnowledgeGraph kb{Source::KB};
  std::vector<SceneGraph> scenes;
};

World generate_world(const WorldSpec& spec);

std::string make_caption(const SceneGraph& sg, std::uint64_t seed);

using QtypeMix = std::array<double, 7>;

std::vector<QARecord> generate_questions(const World& world, int per_image,
                                         const QtypeMix& mix = {1, 1, 1, 1, 1, 1, 1});

struct DatasetSplit {
  std::vector<QARecord> train;
  std::vector<QARecord> val;
  std::vector<QARecord> test;
};

DatasetSplit split_dataset(const std::vector<QARecord>& records,
                           const std::array<double, 3>& ratios = {0.6, 0.2, 0.2},
                           std::uint64_t seed = 0);

class AnswerVocab {
 public:
  AnswerVocab() = default;
  explicit AnswerVocab(std::vector<std::string> answers);

  static AnswerVocab build(const std::vector<QARecord>& train);

  std::size_t size() const { return answers_.size(); }
  const std::string& answer(std::size_t i) const { return answers_.at(i); }
  const std::vector<std::string>& answers() const { return answers_; }
  std::optional<std::size_t> index_of(const std::string& answer) const;
  std::uint64_t hash() const;

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::vector<QARecord> load_qa_jsonl(const std::filesystem::path& path);
void save_qa_jsonl(const std::filesystem::path& path, const std::vector<QARecord>& records);

}  // namespace kbvqa
