#include "kbvqa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "kbvqa/numerics.hpp"
#include "kbvqa/text.hpp"

namespace kbvqa {

using nlohmann::json;

namespace {

std::string slot(const std::string& s) { return spaced(s); }

std::string padded(const char* prefix, std::size_t n, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, n);
  return buf;
}

}  // namespace

std::pair<std::string, std::string> instantiate_template(int qtype,
                                                         const std::vector<TripletText>& c) {
  if (qtype < 0 || qtype > 6) throw PreconditionError("qtype out of range");
  std::size_t need = qtype <= 2 ? 1 : 2;
  if (c.size() != need) throw PreconditionError("template needs " + std::to_string(need) + " triplets");
  if (qtype <= 2) {
    std::string a = slot(c[0].head), r = slot(c[0].relation), b = slot(c[0].tail);
    switch (qtype) {
      case 0: return {"What is the relation of " + a + " and " + b + "?", r};
      case 1: return {"What is " + a + " " + r + "?", b};
      default: return {"What " + r + " " + b + "?", a};
    }
  }
  std::string a = slot(c[0].head), r1 = slot(c[0].relation), r2 = slot(c[1].relation),
              cc = slot(c[1].tail);
  switch (qtype) {
    case 3: return {"What is the relation of the object that " + a + " " + r1 + " and " + cc + "?", r2};
    case 4: return {"What is the relation of " + a + " and the object that " + r2 + " " + cc + "?", r1};
    case 5: return {"What " + a + " " + r1 + " " + r2 + "?", cc};
    default: return {"What " + r1 + " " + r2 + " " + cc + "?", a};
  }
}

std::vector<TripletText> reason_chain(const QARecord& r) {
  std::vector<TripletText> all = r.reason_sg;
  all.insert(all.end(), r.reason_kb.begin(), r.reason_kb.end());
  if (all.size() != 2) return all;
  const auto same = [](const std::string& x, const std::string& y) {
    return SymbolTable::normalize(x) == SymbolTable::normalize(y);
  };
  if (same(all[0].tail, all[1].head)) return all;
  if (same(all[1].tail, all[0].head)) return {all[1], all[0]};
  throw ValidationError("record " + r.id + ": 2-hop reasons do not form a chain");
}

void validate_record(const QARecord& r) {
  auto fail = [&](const std::string& why) { throw ValidationError("record " + r.id + ": " + why); };
  if (r.qtype < 0 || r.qtype > 6) fail("qtype out of range");
  std::size_t n = r.reason_sg.size() + r.reason_kb.size();
  if (r.qtype <= 2 && (r.hops != 1 || n != 1)) fail("1-hop qtype needs hops=1 and one reason");
  if (r.qtype >= 3 && (r.hops != 2 || n != 2)) fail("2-hop qtype needs hops=2 and two reasons");
  if (r.kb_related != !r.reason_kb.empty()) fail("kb_related must match reason_kb");
  auto chain = reason_chain(r);
  std::string expected;
  switch (r.qtype) {
    case 0: expected = chain[0].relation; break;
    case 1: expected = chain[0].tail; break;
    case 2: expected = chain[0].head; break;
    case 3: expected = chain[1].relation; break;
    case 4: expected = chain[0].relation; break;
    case 5: expected = chain[1].tail; break;
    default: expected = chain[0].head; break;
  }
  if (normalize_surface(expected) != normalize_surface(r.answer)) fail("answer is not the template slot");
}

void WorldSpec::validate() const {
  auto fail = [](const std::string& why) { throw GenerationError("invalid world spec: " + why); };
  if (n_images <= 0 || sg_entities_per_image <= 0 || sg_triplets_per_image <= 0 ||
      n_objects <= 0 || sg_relations <= 0 || kb_entities < 0 || kb_relations <= 0 ||
      kb_triplets < 0)
    fail("counts must be positive");
  if (kb_question_fraction < 0.0 || kb_question_fraction > 1.0) fail("kb_question_fraction outside [0,1]");
  if (kb_triplets == 0 && kb_question_fraction > 0.0)
    fail("kb_question_fraction > 0 needs a non-empty KB");
  if (sg_entities_per_image < 2 || sg_entities_per_image > n_objects)
    fail("sg_entities_per_image must be in [2, n_objects]");
  double pairs = 0.5 * sg_entities_per_image * (sg_entities_per_image - 1);
  if (sg_triplets_per_image > pairs * sg_relations) fail("more scene-graph triplets than entity pairs");
  double ents = static_cast<double>(n_objects) + kb_entities;
  if (kb_triplets > 0.5 * ents * (ents - 1) * kb_relations) fail("more KB triplets than entity pairs");
  if (object_head_fraction < 0 || object_head_fraction > 1 || object_tail_fraction < 0 ||
      object_tail_fraction > 1)
    fail("object fractions outside [0,1]");
  if (kb_entities == 0 && kb_triplets > 0 && object_tail_fraction < 1.0)
    fail("KB tails need concepts");
}

namespace {

constexpr const char* kConsonants = "bdfgklmnprstvz";
constexpr const char* kVowels = "aeiou";

std::vector<std::string> make_tokens(Rng& rng, int n, std::unordered_set<std::string>& used) {
  std::vector<std::string> out;
  const std::size_t nc = 14, nv = 5;
  int misses = 0;
  while (static_cast<int>(out.size()) < n) {
    std::string t;
    // Two syllables until the space gets crowded, then three.
    int syllables = misses > 2000 ? 3 : 2;
    for (int s = 0; s < syllables; ++s) {
      t.push_back(kConsonants[rng.below(nc)]);
      t.push_back(kVowels[rng.below(nv)]);
    }
    if (used.count(t) || is_stop_word(t)) {
      ++misses;
      continue;
    }
    used.insert(t);
    out.push_back(std::move(t));
  }
  return out;
}

std::string pair_key(const std::string& a, const std::string& r, const std::string& b) {
  return a + '\x1f' + r + '\x1f' + b;
}

}  // namespace

World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::unordered_set<std::string> used;
  auto objects = make_tokens(rng, spec.n_objects, used);
  auto concepts = make_tokens(rng, spec.kb_entities, used);
  auto kb_rel = make_tokens(rng, spec.kb_relations, used);
  auto sg_rel = make_tokens(rng, spec.sg_relations, used);

  World w;
  w.spec = spec;
  std::unordered_set<std::string> kb_keys;
  std::unordered_map<std::string, int> object_degree;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 100 * static_cast<std::size_t>(spec.kb_triplets) + 1000;
  while (static_cast<int>(w.kb.size()) < spec.kb_triplets) {
    if (++attempts > max_attempts) throw GenerationError("could not place KB triplets without collisions");
    const std::string& r = kb_rel[rng.below(kb_rel.size())];
    bool head_obj = concepts.empty() || rng.uniform() < spec.object_head_fraction;
    const std::string& h = head_obj ? objects[rng.below(objects.size())] : concepts[rng.below(concepts.size())];
    bool tail_obj = concepts.empty() || rng.uniform() < spec.object_tail_fraction;
    const std::string& t = tail_obj ? objects[rng.below(objects.size())] : concepts[rng.below(concepts.size())];
    if (h == t) continue;
    if (kb_keys.count(pair_key(h, r, t)) || kb_keys.count(pair_key(t, r, h))) continue;
    kb_keys.insert(pair_key(h, r, t));
    w.kb.add({h, r, t});
    ++object_degree[h];
    ++object_degree[t];
  }

  std::vector<std::size_t> order(objects.size());
  for (int img = 0; img < spec.n_images; ++img) {
    std::vector<std::string> ents;
    for (int tries = 0;; ++tries) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      // Partial Fisher-Yates: the first k slots are a uniform sample.
      for (int i = 0; i < spec.sg_entities_per_image; ++i) {
        std::size_t j = i + rng.below(order.size() - i);
        std::swap(order[i], order[j]);
      }
      ents.clear();
      for (int i = 0; i < spec.sg_entities_per_image; ++i) ents.push_back(objects[order[i]]);
      bool linked = spec.kb_triplets == 0 ||
                    std::any_of(ents.begin(), ents.end(), [&](const std::string& e) { return object_degree.count(e); });
      if (linked) break;
      if (tries > 1000) throw GenerationError("scene graph cannot be linked to the KB");
    }
    SceneGraph sg;
    sg.image_id = padded("img", static_cast<std::size_t>(img), 5);
    std::unordered_set<std::string> keys;
    std::size_t sg_attempts = 0;
    while (static_cast<int>(sg.triplets.size()) < spec.sg_triplets_per_image) {
      if (++sg_attempts > 100000) throw GenerationError("could not place scene-graph triplets");
      std::size_t a = rng.below(ents.size()), b = rng.below(ents.size());
      if (a == b) continue;
      const std::string& r = sg_rel[rng.below(sg_rel.size())];
      if (keys.count(pair_key(ents[a], r, ents[b])) || keys.count(pair_key(ents[b], r, ents[a]))) continue;
      keys.insert(pair_key(ents[a], r, ents[b]));
      sg.triplets.push_back({ents[a], r, ents[b]});
    }
    w.scenes.push_back(std::move(sg));
  }
  return w;
}

std::string make_caption(const SceneGraph& sg, std::uint64_t seed) {
  std::vector<std::size_t> idx(sg.triplets.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed ^ fnv1a64(sg.image_id));
  rng.shuffle(idx);
  idx.resize((idx.size() + 1) / 2);
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> parts;
  for (std::size_t i : idx) parts.push_back(verbalize(sg.triplets[i]));
  return join(parts, ". ");
}

namespace {

// Lookup over one image's scene graph plus the KB, by surface form.
class WorldView {
 public:
  explicit WorldView(const KnowledgeGraph& kb) {
    for (std::size_t i = 0; i < kb.size(); ++i) {
      kb_.push_back(kb.text(i));
      by_head_[kb_.back().head].push_back(i);
      by_tail_[kb_.back().tail].push_back(i);
    }
  }

  void set_scene(const SceneGraph& sg) { sg_ = &sg; }

  template <typename Fn>
  void for_head(const std::string& h, Fn&& fn) const {
    for (const auto& t : sg_->triplets)
      if (t.head == h) fn(t);
    if (auto it = by_head_.find(h); it != by_head_.end())
      for (std::size_t i : it->second) fn(kb_[i]);
  }

  template <typename Fn>
  void for_tail(const std::string& tl, Fn&& fn) const {
    for (const auto& t : sg_->triplets)
      if (t.tail == tl) fn(t);
    if (auto it = by_tail_.find(tl); it != by_tail_.end())
      for (std::size_t i : it->second) fn(kb_[i]);
  }

  std::set<std::string> tails(const std::string& h, const std::string& r) const {
    std::set<std::string> out;
    for_head(h, [&](const TripletText& t) { if (t.relation == r) out.insert(t.tail); });
    return out;
  }
  std::set<std::string> heads(const std::string& r, const std::string& tl) const {
    std::set<std::string> out;
    for_tail(tl, [&](const TripletText& t) { if (t.relation == r) out.insert(t.head); });
    return out;
  }
  std::set<std::string> relations(const std::string& h, const std::string& tl) const {
    std::set<std::string> out;
    for_head(h, [&](const TripletText& t) { if (t.tail == tl) out.insert(t.relation); });
    return out;
  }

  const std::vector<TripletText>& kb() const { return kb_; }
  const std::vector<std::size_t>& kb_by_head(const std::string& h) const {
    auto it = by_head_.find(h);
    return it == by_head_.end() ? empty_ : it->second;
  }
  const std::vector<std::size_t>& kb_by_tail(const std::string& t) const {
    auto it = by_tail_.find(t);
    return it == by_tail_.end() ? empty_ : it->second;
  }

 private:
  std::vector<TripletText> kb_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_head_, by_tail_;
  const SceneGraph* sg_ = nullptr;
  std::vector<std::size_t> empty_;
};

std::set<std::string> valid_answers(const WorldView& v, int qtype, const std::vector<TripletText>& c) {
  std::set<std::string> out;
  switch (qtype) {
    case 0: return v.relations(c[0].head, c[0].tail);
    case 1: return v.tails(c[0].head, c[0].relation);
    case 2: return v.heads(c[0].relation, c[0].tail);
    case 3:
      for (const auto& b : v.tails(c[0].head, c[0].relation))
        for (const auto& r : v.relations(b, c[1].tail)) out.insert(r);
      return out;
    case 4:
      for (const auto& b : v.heads(c[1].relation, c[1].tail))
        for (const auto& r : v.relations(c[0].head, b)) out.insert(r);
      return out;
    case 5:
      for (const auto& b : v.tails(c[0].head, c[0].relation))
        for (const auto& x : v.tails(b, c[1].relation)) out.insert(x);
      return out;
    default:
      for (const auto& b : v.heads(c[1].relation, c[1].tail))
        for (const auto& x : v.heads(c[0].relation, b)) out.insert(x);
      return out;
  }
}

std::size_t weighted_choice(Rng& rng, const QtypeMix& mix, double total) {
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    if (u < mix[i]) return i;
    u -= mix[i];
  }
  for (std::size_t i = mix.size(); i-- > 0;)
    if (mix[i] > 0) return i;
  return 0;
}

}  // namespace

std::vector<QARecord> generate_questions(const World& world, int per_image, const QtypeMix& mix) {
  if (per_image <= 0) throw GenerationError("per_image must be positive");
  double total = 0;
  for (double m : mix) {
    if (m < 0 || !std::isfinite(m)) throw GenerationError("qtype weights must be non-negative");
    total += m;
  }
  if (total <= 0) throw GenerationError("qtype weights are all zero");

  const double kb_frac = world.spec.kb_question_fraction;
  WorldView view(world.kb);
  Rng rng(world.spec.seed * 0x9E3779B97F4A7C15ULL + 11);
  std::vector<QARecord> out;
  std::array<std::size_t, 7> failures{}, requests{};
  const int kMaxAttempts = 200;

  for (const auto& sg : world.scenes) {
    view.set_scene(sg);
    std::string caption = make_caption(sg, world.spec.seed);
    std::vector<std::size_t> kb_from_scene;
    {
      std::set<std::string> objs;
      for (const auto& t : sg.triplets) objs.insert({t.head, t.tail});
      for (const auto& o : objs)
        for (std::size_t i : view.kb_by_head(o)) kb_from_scene.push_back(i);
    }
    std::set<std::string> asked;
    int made = 0;
    int slot_retries = 0;
    while (made < per_image) {
      std::size_t qt = weighted_choice(rng, mix, total);
      bool kbq = rng.uniform() < kb_frac;
      ++requests[qt];
      bool ok = false;
      for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
        std::vector<TripletText> chain, rsg, rkb;
        const auto& scene = sg.triplets;
        if (qt <= 2) {
          if (kbq) {
            if (kb_from_scene.empty()) break;
            chain = {view.kb()[kb_from_scene[rng.below(kb_from_scene.size())]]};
            rkb = chain;
          } else {
            chain = {scene[rng.below(scene.size())]};
            rsg = chain;
          }
        } else if (kbq && (qt == 4 || qt == 6)) {
          // KB triplet leads into the scene graph; the answer lives in the KB part.
          const TripletText& t2 = scene[rng.below(scene.size())];
          std::vector<std::size_t> prev;
          for (std::size_t i : view.kb_by_tail(t2.head))
            if (view.kb()[i].head != t2.tail) prev.push_back(i);
          if (prev.empty()) continue;
          const TripletText& t1 = view.kb()[prev[rng.below(prev.size())]];
          chain = {t1, t2};
          rkb = {t1};
          rsg = {t2};
        } else {
          const TripletText& t1 = scene[rng.below(scene.size())];
          if (kbq) {
            std::vector<std::size_t> next;
            for (std::size_t i : view.kb_by_head(t1.tail))
              if (view.kb()[i].tail != t1.head) next.push_back(i);
            if (next.empty()) continue;
            const TripletText& t2 = view.kb()[next[rng.below(next.size())]];
            chain = {t1, t2};
            rsg = {t1};
            rkb = {t2};
          } else {
            std::vector<const TripletText*> next;
            for (const auto& t : scene)
              if (t.head == t1.tail && !(t == t1) && t.tail != t1.head) next.push_back(&t);
            if (next.empty()) continue;
            const TripletText& t2 = *next[rng.below(next.size())];
            chain = {t1, t2};
            rsg = chain;
          }
        }
        if (valid_answers(view, static_cast<int>(qt), chain).size() != 1) continue;
        auto [q, a] = instantiate_template(static_cast<int>(qt), chain);
        if (!asked.insert(q).second) continue;
        QARecord r;
        r.id = padded("q", out.size(), 6);
        r.image_id = sg.image_id;
        r.question = std::move(q);
        r.answer = std::move(a);
        r.qtype = static_cast<int>(qt);
        r.hops = qt <= 2 ? 1 : 2;
        r.kb_related = kbq;
        r.caption = caption;
        r.reason_sg = std::move(rsg);
        r.reason_kb = std::move(rkb);
        out.push_back(std::move(r));
        ok = true;
      }
      if (ok) {
        ++made;
        continue;
      }
      // This image cannot host the drawn (qtype, kb) combination; redraw the slot.
      ++failures[qt];
      if (++slot_retries > 50 * per_image)
        throw GenerationError("image " + sg.image_id + " cannot host questions of qtype " + std::to_string(qt));
    }
  }
  for (std::size_t qt = 0; qt < 7; ++qt) {
    if (requests[qt] > 20 && failures[qt] * 10 > requests[qt])
      throw GenerationError("qtype " + std::to_string(qt) + " could not be instantiated on " +
                            std::to_string(failures[qt]) + " of " + std::to_string(requests[qt]) +
                            " draws");
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<QARecord>& records, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
  double sum = 0;
  int nonzero = 0;
  for (double r : ratios) {
    if (r < 0) throw PreconditionError("split ratios must be non-negative");
    sum += r;
    nonzero += r > 0;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("split ratios must sum to 1");
  std::vector<std::string> images;
  for (const auto& r : records) images.push_back(r.image_id);
  std::sort(images.begin(), images.end());
  images.erase(std::unique(images.begin(), images.end()), images.end());
  if (static_cast<int>(images.size()) < nonzero)
    throw PreconditionError("fewer images than non-empty splits");
  Rng rng(seed);
  rng.shuffle(images);
  const double n = static_cast<double>(images.size());
  std::size_t n_train = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
  std::size_t n_val = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
  if (ratios[2] == 0) n_val = images.size() - n_train;
  std::map<std::string, int> where;
  for (std::size_t i = 0; i < images.size(); ++i)
    where[images[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  DatasetSplit out;
  for (const auto& r : records) {
    int w = where[r.image_id];
    (w == 0 ? out.train : w == 1 ? out.val : out.test).push_back(r);
  }
  return out;
}

AnswerVocab::AnswerVocab(std::vector<std::string> answers) : answers_(std::move(answers)) {
  std::sort(answers_.begin(), answers_.end());
  answers_.erase(std::unique(answers_.begin(), answers_.end()), answers_.end());
  for (std::size_t i = 0; i < answers_.size(); ++i) index_[answers_[i]] = i;
}

AnswerVocab AnswerVocab::build(const std::vector<QARecord>& train) {
  if (train.empty()) throw PreconditionError("answer vocabulary needs training records");
  std::vector<std::string> answers;
  for (const auto& r : train) answers.push_back(r.answer);
  return AnswerVocab(std::move(answers));
}

std::optional<std::size_t> AnswerVocab::index_of(const std::string& answer) const {
  auto it = index_.find(answer);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t AnswerVocab::hash() const { return fnv1a64(join(answers_, "\n")); }

namespace {

json triplets_json(const std::vector<TripletText>& ts) {
  json a = json::array();
  for (const auto& t : ts) a.push_back({t.head, t.relation, t.tail});
  return a;
}

std::vector<TripletText> triplets_from(const json& a, const std::string& id) {
  if (!a.is_array()) throw ValidationError("record " + id + ": reasons must be an array");
  std::vector<TripletText> out;
  for (const auto& t : a) {
    if (!t.is_array() || t.size() != 3) throw ValidationError("record " + id + ": malformed reason triplet");
    out.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
  }
  return out;
}

}  // namespace

void save_qa_jsonl(const std::filesystem::path& path, const std::vector<QARecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    json j = {{"id", r.id},
              {"image_id", r.image_id},
              {"question", r.question},
              {"answer", r.answer},
              {"qtype", r.qtype},
              {"hops", r.hops},
              {"kb_related", r.kb_related},
              {"caption", r.caption},
              {"reason_sg", triplets_json(r.reason_sg)},
              {"reason_kb", triplets_json(r.reason_kb)}};
    out << j.dump() << '\n';
  }
}

std::vector<QARecord> load_qa_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<QARecord> out;
  std::string line;
  std::size_t lineno = 0;
  static const std::set<std::string> kFields = {"id",   "image_id", "question", "answer",    "qtype",
                                               "hops", "kb_related", "caption", "reason_sg", "reason_kb"};
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
    std::string id = j.value("id", std::string("<line ") + std::to_string(lineno) + ">");
    for (const auto& f : kFields)
      if (!j.contains(f)) throw ValidationError("record " + id + ": missing field '" + f + "'");
    QARecord r;
    try {
      r.id = j["id"].get<std::string>();
      r.image_id = j["image_id"].get<std::string>();
      r.question = j["question"].get<std::string>();
      r.answer = j["answer"].get<std::string>();
      r.qtype = j["qtype"].get<int>();
      r.hops = j["hops"].get<int>();
      r.kb_related = j["kb_related"].get<bool>();
      r.caption = j["caption"].get<std::string>();
      r.reason_sg = triplets_from(j["reason_sg"], id);
      r.reason_kb = triplets_from(j["reason_kb"], id);
    } catch (const json::type_error& e) {
      throw ValidationError("record " + id + ": " + e.what());
    }
    validate_record(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace kbvqa
