#include "kbvqa/knowledge_store.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include "json.hpp"

#include "kbvqa/text.hpp"

namespace kbvqa {

using nlohmann::json;

std::string_view source_name(Source s) { return s == Source::KB ? "kb" : "sg"; }

std::string verbalize(const TripletText& t) {
  return spaced(t.head) + " " + spaced(t.relation) + " " + spaced(t.tail);
}

std::string SymbolTable::normalize(std::string_view surface) {
  std::size_t b = 0, e = surface.size();
  while (b < e && std::isspace(static_cast<unsigned char>(surface[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(surface[e - 1]))) --e;
  std::string out(surface.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

EntityId SymbolTable::intern_entity(std::string_view surface) {
  std::string s = normalize(surface);
  if (s.empty()) throw PreconditionError("empty entity surface form");
  auto [it, inserted] = entity_ids_.try_emplace(s, static_cast<EntityId>(entities_.size()));
  if (inserted) entities_.push_back(std::move(s));
  return it->second;
}

RelationId SymbolTable::intern_relation(std::string_view surface) {
  std::string s = normalize(surface);
  if (s.empty()) throw PreconditionError("empty relation surface form");
  auto [it, inserted] = relation_ids_.try_emplace(s, static_cast<RelationId>(relations_.size()));
  if (inserted) relations_.push_back(std::move(s));
  return it->second;
}

std::optional<EntityId> SymbolTable::find_entity(std::string_view surface) const {
  auto it = entity_ids_.find(normalize(surface));
  if (it == entity_ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> SymbolTable::find_relation(std::string_view surface) const {
  auto it = relation_ids_.find(normalize(surface));
  if (it == relation_ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& SymbolTable::entity(EntityId id) const {
  if (id >= entities_.size()) throw LookupError("unknown entity id " + std::to_string(id));
  return entities_[id];
}

const std::string& SymbolTable::relation(RelationId id) const {
  if (id >= relations_.size()) throw LookupError("unknown relation id " + std::to_string(id));
  return relations_[id];
}

std::uint64_t KnowledgeGraph::key(EntityId h, RelationId r, EntityId t) {
  constexpr std::uint64_t kLimit = 1ULL << 21;
  if (h >= kLimit || r >= kLimit || t >= kLimit) throw PreconditionError("symbol table too large");
  return (std::uint64_t{h} << 42) | (std::uint64_t{r} << 21) | std::uint64_t{t};
}

bool KnowledgeGraph::add(const TripletText& text) {
  EntityId h = symbols_.intern_entity(text.head);
  RelationId r = symbols_.intern_relation(text.relation);
  EntityId t = symbols_.intern_entity(text.tail);
  auto [it, inserted] = index_.try_emplace(key(h, r, t), triplets_.size());
  if (!inserted) {
    ++duplicates_;
    return false;
  }
  std::size_t id = triplets_.size();
  triplets_.push_back({h, r, t, source_});
  if (adjacency_.size() < symbols_.entity_count()) adjacency_.resize(symbols_.entity_count());
  adjacency_[h].push_back(id);
  if (t != h) adjacency_[t].push_back(id);
  for (EntityId e : {h, t}) {
    for (const auto& tok : tokenize(symbols_.entity(e))) {
      auto& ents = keyword_index_[tok];
      if (std::find(ents.begin(), ents.end(), e) == ents.end()) ents.push_back(e);
    }
  }
  return true;
}

KnowledgeGraph KnowledgeGraph::from_triplets(const std::vector<TripletText>& triplets,
                                             Source source) {
  KnowledgeGraph g(source);
  for (const auto& t : triplets) g.add(t);
  return g;
}

namespace {

std::string require_string(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end() || !it->is_string())
    throw ParseError(std::string("missing string field '") + field + "'", line);
  return it->get<std::string>();
}

}  // namespace

KnowledgeGraph KnowledgeGraph::load_jsonl(const std::filesystem::path& path, Source source) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  KnowledgeGraph g(source);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", lineno);
    TripletText t{require_string(obj, "head", lineno), require_string(obj, "relation", lineno),
                  require_string(obj, "tail", lineno)};
    try {
      g.add(t);
    } catch (const PreconditionError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return g;
}

void KnowledgeGraph::save_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < triplets_.size(); ++i) {
    TripletText t = text(i);
    json obj = {{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}};
    out << obj.dump() << '\n';
  }
}

const std::vector<std::size_t>& KnowledgeGraph::incident(EntityId e) const {
  static const std::vector<std::size_t> none;
  if (e >= symbols_.entity_count()) throw LookupError("unknown entity id " + std::to_string(e));
  return e < adjacency_.size() ? adjacency_[e] : none;
}

std::optional<std::size_t> KnowledgeGraph::find(const TripletText& t) const {
  auto h = symbols_.find_entity(t.head);
  auto r = symbols_.find_relation(t.relation);
  auto tl = symbols_.find_entity(t.tail);
  if (!h || !r || !tl) return std::nullopt;
  auto it = index_.find(key(*h, *r, *tl));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TripletText KnowledgeGraph::text(std::size_t id) const {
  if (id >= triplets_.size()) throw LookupError("unknown triplet id " + std::to_string(id));
  const Triplet& t = triplets_[id];
  return {symbols_.entity(t.head), symbols_.relation(t.relation), symbols_.entity(t.tail)};
}

std::string KnowledgeGraph::verbalize(std::size_t id) const { return kbvqa::verbalize(text(id)); }

std::string KnowledgeGraph::verbalize(const Triplet& t) const {
  return kbvqa::verbalize(
      TripletText{symbols_.entity(t.head), symbols_.relation(t.relation), symbols_.entity(t.tail)});
}

std::vector<EntityId> KnowledgeGraph::match_keywords(std::string_view text) const {
  std::vector<EntityId> out;
  for (const auto& tok : tokenize(text)) {
    if (is_stop_word(tok)) continue;
    auto it = keyword_index_.find(tok);
    if (it == keyword_index_.end()) continue;
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::size_t> KnowledgeGraph::extract_subgraph(const std::vector<EntityId>& seeds,
                                                          int hops) const {
  if (hops < 0) throw PreconditionError("hops must be non-negative");
  for (EntityId s : seeds)
    if (s >= symbols_.entity_count())
      throw PreconditionError("unknown seed entity id " + std::to_string(s));

  std::vector<char> seen_entity(symbols_.entity_count(), 0);
  std::vector<char> seen_triplet(triplets_.size(), 0);
  std::vector<EntityId> frontier;
  for (EntityId s : seeds) {
    if (!seen_entity[s]) {
      seen_entity[s] = 1;
      frontier.push_back(s);
    }
  }
  std::vector<std::size_t> out;
  for (int hop = 0; hop < hops && !frontier.empty(); ++hop) {
    std::vector<EntityId> next;
    for (EntityId e : frontier) {
      if (e >= adjacency_.size()) continue;
      for (std::size_t tid : adjacency_[e]) {
        if (!seen_triplet[tid]) {
          seen_triplet[tid] = 1;
          out.push_back(tid);
        }
        const Triplet& t = triplets_[tid];
        EntityId other = t.head == e ? t.tail : t.head;
        if (!seen_entity[other]) {
          seen_entity[other] = 1;
          next.push_back(other);
        }
      }
    }
    frontier = std::move(next);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SceneGraph> load_scene_graphs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<SceneGraph> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    SceneGraph sg;
    sg.image_id = require_string(obj, "image_id", lineno);
    auto it = obj.find("triplets");
    if (it == obj.end() || !it->is_array()) throw ParseError("missing 'triplets' array", lineno);
    for (const auto& t : *it) {
      if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_string() ||
          !t[2].is_string())
        throw ParseError("triplet must be [head, relation, tail]", lineno);
      sg.triplets.push_back({t[0].get<std::string>(), t[1].get<std::string>(),
                             t[2].get<std::string>()});
    }
    out.push_back(std::move(sg));
  }
  return out;
}

void save_scene_graphs(const std::filesystem::path& path, const std::vector<SceneGraph>& graphs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& sg : graphs) {
    json trips = json::array();
    for (const auto& t : sg.triplets) trips.push_back({t.head, t.relation, t.tail});
    out << json{{"image_id", sg.image_id}, {"triplets", trips}}.dump() << '\n';
  }
}

}  // namespace kbvqa
