#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kbvqa {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Source { KB, SG };

std::string_view source_name(Source s);

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

// Surface-form triplet, as it appears in files and QA records.
struct TripletText {
  std::string head;
  std::string relation;
  std::string tail;

  bool operator==(const TripletText&) const = default;
  auto operator<=>(const TripletText&) const = default;
};

// "h r t" with underscores rendered as spaces.
std::string verbalize(const TripletText& t);

class SymbolTable {
 public:
  EntityId intern_entity(std::string_view surface);
  RelationId intern_relation(std::string_view surface);

  std::optional<EntityId> find_entity(std::string_view surface) const;
  std::optional<RelationId> find_relation(std::string_view surface) const;

  const std::string& entity(EntityId id) const;
  const std::string& relation(RelationId id) const;

  std::size_t entity_count() const { return entities_.size(); }
  std::size_t relation_count() const { return relations_.size(); }

  // Lowercase and trim; interior underscores and spaces are kept.
  static std::string normalize(std::string_view surface);

 private:
  std::vector<std::string> entities_;
  std::vector<std::string> relations_;
  std::unordered_map<std::string, EntityId> entity_ids_;
  std::unordered_map<std::string, RelationId> relation_ids_;
};

struct Triplet {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  Source source = Source::KB;

  bool operator==(const Triplet&) const = default;
};

class KnowledgeGraph {
 public:
  explicit KnowledgeGraph(Source source = Source::KB) : source_(source) {}

  static KnowledgeGraph load_jsonl(const std::filesystem::path& path, Source source);
  static KnowledgeGraph from_triplets(const std::vector<TripletText>& triplets, Source source);

  // Returns false (and counts a duplicate) if the triplet is already present.
  bool add(const TripletText& t);

  Source source() const { return source_; }
  const SymbolTable& symbols() const { return symbols_; }
  const std::vector<Triplet>& triplets() const { return triplets_; }
  std::size_t size() const { return triplets_.size(); }
  bool empty() const { return triplets_.empty(); }
  std::size_t duplicate_count() const { return duplicates_; }

  const std::vector<std::size_t>& incident(EntityId e) const;
  std::optional<std::size_t> find(const TripletText& t) const;

  TripletText text(std::size_t triplet_id) const;
  std::string verbalize(std::size_t triplet_id) const;
  std::string verbalize(const Triplet& t) const;

  // Entities whose surface tokens intersect the non-stop-word tokens of text.
  std::vector<EntityId> match_keywords(std::string_view text) const;

  // Triplet ids reachable within `hops` undirected edge traversals of a seed.
  std::vector<std::size_t> extract_subgraph(const std::vector<EntityId>& seeds, int hops) const;

  void save_jsonl(const std::filesystem::path& path) const;

 private:
  static std::uint64_t key(EntityId h, RelationId r, EntityId t);

  Source source_;
  SymbolTable symbols_;
  std::vector<Triplet> triplets_;
  std::vector<std::vector<std::size_t>> adjacency_;
  std::unordered_map<std::string, std::vector<EntityId>> keyword_index_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::size_t duplicates_ = 0;
};

struct SceneGraph {
  std::string image_id;
  std::vector<TripletText> triplets;

  bool operator==(const SceneGraph&) const = default;
};

std::vector<SceneGraph> load_scene_graphs(const std::filesystem::path& path);
void save_scene_graphs(const std::filesystem::path& path, const std::vector<SceneGraph>& graphs);

}  // namespace kbvqa
