#include "kbvqa/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

namespace kbvqa {

double contrastive_loss(std::span<const double> q, const std::vector<Vector>& positives,
                        const std::vector<Vector>& negatives) {
  if (positives.empty() || negatives.empty())
    throw ContractError("contrastive loss needs at least one positive and one negative");
  double pos = 0, neg = 0;
  for (const auto& p : positives) pos += cosine_similarity(q, p);
  for (const auto& n : negatives) neg += cosine_similarity(q, n);
  return static_cast<double>(positives.size()) * neg - static_cast<double>(negatives.size()) * pos;
}

DualEncoder DualEncoder::baseline(const BaseEmbedder& base) {
  DualEncoder e;
  e.base = base;
  return e;
}

DualEncoder DualEncoder::with_heads(const BaseEmbedder& base, std::size_t hidden, std::size_t dim,
                                    std::uint64_t seed, bool near_identity) {
  DualEncoder e;
  e.base = base;
  Rng rng(seed);
  if (near_identity) {
    e.question_head = ProjectionHead::near_identity(base.dim(), hidden, dim, rng);
    // Same projection for both towers so the start reproduces base cosine.
    e.triplet_head = e.question_head;
  } else {
    e.question_head = ProjectionHead::random(base.dim(), hidden, dim, rng);
    e.triplet_head = ProjectionHead::random(base.dim(), hidden, dim, rng);
  }
  return e;
}

std::size_t DualEncoder::dim() const { return question_head ? question_head->dim() : base.dim(); }

namespace {

Matrix normalized_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double n = norm(row);
    if (n > 0)
      for (double& v : row) v /= n;
  }
  return m;
}

}  // namespace

Matrix DualEncoder::encode_questions(const std::vector<std::string>& texts) const {
  Matrix x = base.embed_batch(texts);
  return question_head ? question_head->forward(x) : normalized_rows(std::move(x));
}

Matrix DualEncoder::encode_triplets(const std::vector<std::string>& verbalized) const {
  Matrix x = base.embed_batch(verbalized);
  return triplet_head ? triplet_head->forward(x) : normalized_rows(std::move(x));
}

void DualEncoder::save(const std::filesystem::path& dir, const std::string& stem) const {
  if (!question_head || !triplet_head) throw CheckpointError("baseline encoder has no heads to save");
  std::filesystem::create_directories(dir);
  question_head->save(dir / (stem + "_question_head.json"));
  triplet_head->save(dir / (stem + "_triplet_head.json"));
}

DualEncoder DualEncoder::load(const std::filesystem::path& dir, const std::string& stem,
                              const BaseEmbedder& base) {
  DualEncoder e;
  e.base = base;
  e.question_head = ProjectionHead::load(dir / (stem + "_question_head.json"));
  e.triplet_head = ProjectionHead::load(dir / (stem + "_triplet_head.json"));
  if (e.question_head->d_base() != base.dim() || e.triplet_head->d_base() != base.dim())
    throw CheckpointError("head input dimension does not match the base embedder");
  if (e.question_head->dim() != e.triplet_head->dim())
    throw CheckpointError("question and triplet heads disagree on output dimension");
  return e;
}

TripletCorpus TripletCorpus::from_kb(const KnowledgeGraph& kb, const std::vector<SceneGraph>& scenes, int hops) {
  TripletCorpus c;
  c.source_ = Source::KB;
  c.hops_ = hops;
  c.kb_ = &kb;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    c.triplets_.push_back(kb.text(i));
    c.verbalized_.push_back(kb.verbalize(i));
  }
  for (const auto& sg : scenes) {
    std::vector<EntityId> tags;
    for (const auto& t : sg.triplets)
      for (const auto* e : {&t.head, &t.tail})
        if (auto id = kb.symbols().find_entity(*e)) tags.push_back(*id);
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    c.image_tags_[sg.image_id] = std::move(tags);
  }
  return c;
}

TripletCorpus TripletCorpus::from_scenes(const std::vector<SceneGraph>& scenes) {
  TripletCorpus c;
  c.source_ = Source::SG;
  for (const auto& sg : scenes) {
    std::size_t begin = c.triplets_.size();
    for (const auto& t : sg.triplets) {
      c.triplets_.push_back(t);
      c.verbalized_.push_back(verbalize(t));
    }
    c.image_rows_[sg.image_id] = {begin, c.triplets_.size()};
  }
  return c;
}

std::vector<std::size_t> TripletCorpus::candidates(const QARecord& r) const {
  std::vector<std::size_t> out;
  if (source_ == Source::SG) {
    auto it = image_rows_.find(r.image_id);
    if (it == image_rows_.end()) throw LookupError("no scene graph for image " + r.image_id);
    for (std::size_t i = it->second.first; i < it->second.second; ++i) out.push_back(i);
    return out;
  }
  std::vector<EntityId> seeds = kb_->match_keywords(r.question);
  if (auto it = image_tags_.find(r.image_id); it != image_tags_.end())
    seeds.insert(seeds.end(), it->second.begin(), it->second.end());
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  if (seeds.empty()) {
    out.resize(triplets_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }
  return kb_->extract_subgraph(seeds, hops_);
}

std::optional<std::size_t> TripletCorpus::find(const TripletText& t, const std::string& image_id) const {
  if (source_ == Source::KB) return kb_->find(t);
  auto it = image_rows_.find(image_id);
  if (it == image_rows_.end()) return std::nullopt;
  for (std::size_t i = it->second.first; i < it->second.second; ++i)
    if (triplets_[i] == t) return i;
  return std::nullopt;
}

std::vector<std::size_t> TripletCorpus::ground_truth(const QARecord& r) const {
  std::vector<std::size_t> out;
  for (const auto& t : reasons(r)) {
    auto row = find(t, r.image_id);
    if (!row) throw LookupError("record " + r.id + ": reason '" + verbalize(t) + "' not in the " +
                                std::string(source_name(source_)) + " corpus");
    out.push_back(*row);
  }
  return out;
}

std::vector<std::size_t> RetrievalResult::ids() const {
  std::vector<std::size_t> out;
  for (const auto& [id, s] : ranked) out.push_back(id);
  return out;
}

RetrievalIndex::RetrievalIndex(const TripletCorpus& corpus, const DualEncoder& encoder)
    : source_(corpus.source()), embeddings_(encoder.encode_triplets(corpus.verbalized())) {}

RetrievalResult RetrievalIndex::topk(std::span<const double> q, std::size_t k,
                                     const std::vector<std::size_t>* candidates) const {
  if (k == 0) throw PreconditionError("k must be at least 1");
  if (q.size() != embeddings_.cols())
    throw DimensionError("query dim " + std::to_string(q.size()) + " vs index " + embeddings_.shape_string());
  std::vector<std::pair<std::size_t, double>> scored;
  const double qn = norm(q);
  auto score = [&](std::size_t row) {
    auto e = embeddings_.row(row);
    double en = norm(e);
    if (qn == 0 || en == 0) return 0.0;
    return std::clamp(dot(q, e) / (qn * en), -1.0, 1.0);
  };
  if (candidates) {
    scored.reserve(candidates->size());
    for (std::size_t row : *candidates) {
      if (row >= embeddings_.rows()) throw LookupError("candidate row out of range");
      scored.emplace_back(row, score(row));
    }
  } else {
    scored.reserve(embeddings_.rows());
    for (std::size_t row = 0; row < embeddings_.rows(); ++row) scored.emplace_back(row, score(row));
  }
  if (scored.empty()) throw PreconditionError("retrieval over an empty candidate set");
  std::size_t take = std::min(k, scored.size());
  auto better = [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  scored.resize(take);
  return {std::move(scored), k};
}

RetrievalResult retrieve_topk(const std::string& question, const RetrievalIndex& index,
                              const DualEncoder& encoder, std::size_t k,
                              const std::vector<std::size_t>* candidates) {
  Matrix q = encoder.encode_questions({question});
  return index.topk(q.row(0), k, candidates);
}

double batch_contrastive_loss(const Matrix& question_base, const Matrix& triplet_base,
                              const std::vector<std::vector<std::size_t>>& positives,
                              const DualEncoder& encoder, Gradients* grads) {
  if (!encoder.question_head || !encoder.triplet_head) throw PreconditionError("training needs projection heads");
  if (positives.size() != question_base.rows()) throw DimensionError("one positive list per question");
  ProjectionHead::Cache qc, tc;
  Matrix q = encoder.question_head->forward(question_base, grads ? &qc : nullptr);
  Matrix t = encoder.triplet_head->forward(triplet_base, grads ? &tc : nullptr);
  Matrix s = matmul_bt(q, t);
  const std::size_t nt = t.rows();
  Matrix ds(q.rows(), nt);
  double total = 0;
  std::size_t used = 0;
  std::vector<char> is_pos(nt);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::fill(is_pos.begin(), is_pos.end(), 0);
    for (std::size_t p : positives[i]) is_pos.at(p) = 1;
    std::size_t np = 0;
    for (char c : is_pos) np += c;
    std::size_t nn = nt - np;
    if (np == 0 || nn == 0) continue;
    ++used;
    for (std::size_t j = 0; j < nt; ++j) {
      double w = is_pos[j] ? -static_cast<double>(nn) : static_cast<double>(np);
      total += w * s(i, j);
      ds(i, j) = w;
    }
  }
  if (used == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(used);
  if (grads) {
    for (double& v : ds.values()) v *= inv;
    auto zeros = [](const ProjectionHead& h) {
      return Gradients{Matrix(h.w1.rows(), h.w1.cols()), Matrix(h.b1.rows(), 1), Matrix(h.w2.rows(), h.w2.cols()),
                       Matrix(h.b2.rows(), 1)};
    };
    Gradients qg = zeros(*encoder.question_head);
    Gradients tg = zeros(*encoder.triplet_head);
    encoder.question_head->backward(qc, matmul(ds, t), qg);
    encoder.triplet_head->backward(tc, matmul_at(ds, q), tg);
    grads->clear();
    for (auto& g : qg) grads->push_back(std::move(g));
    for (auto& g : tg) grads->push_back(std::move(g));
  }
  return total * inv;
}

TrainStats train_retriever(const std::vector<QARecord>& train, const TripletCorpus& corpus,
                           DualEncoder& encoder, const RetrieverConfig& config) {
  if (!encoder.question_head || !encoder.triplet_head) throw PreconditionError("training needs projection heads");
  if (config.batch == 0) throw PreconditionError("batch size must be positive");
  if (!(config.lr > 0)) throw PreconditionError("learning rate must be positive");
  TrainStats stats;
  std::vector<std::size_t> usable;
  std::vector<std::vector<std::size_t>> gt(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (corpus.reasons(train[i]).empty()) continue;
    gt[i] = corpus.ground_truth(train[i]);
    usable.push_back(i);
  }
  if (config.epochs <= 0 || usable.empty()) return stats;

  std::vector<std::string> questions;
  for (const auto& r : train) questions.push_back(r.question);
  Matrix q_base = encoder.base.embed_batch(questions);
  std::map<std::size_t, Vector> t_base;
  for (std::size_t i : usable)
    for (std::size_t row : gt[i])
      if (!t_base.count(row)) t_base[row] = encoder.base.embed(corpus.verbalized(row));

  ParamRefs params = encoder.question_head->params();
  for (Matrix* p : encoder.triplet_head->params()) params.push_back(p);
  AdamWState state = make_adamw_state(params);
  Rng rng(config.seed);
  const std::size_t db = encoder.base.dim();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = usable;
    rng.shuffle(order);
    double sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      std::size_t end = std::min(order.size(), start + config.batch);
      if (end - start < 2) {
        ++stats.skipped_batches;
        std::cerr << "warning: skipping retriever batch of size 1 (no in-batch negatives)\n";
        continue;
      }
      std::vector<std::size_t> rows;
      for (std::size_t b = start; b < end; ++b)
        for (std::size_t row : gt[order[b]]) rows.push_back(row);
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      Matrix xq(end - start, db), xt(rows.size(), db);
      std::vector<std::vector<std::size_t>> pos(end - start);
      for (std::size_t b = start; b < end; ++b) {
        auto src = q_base.row(order[b]);
        std::copy(src.begin(), src.end(), xq.row(b - start).begin());
        for (std::size_t row : gt[order[b]])
          pos[b - start].push_back(static_cast<std::size_t>(
              std::lower_bound(rows.begin(), rows.end(), row) - rows.begin()));
        if (pos[b - start].size() == rows.size()) ++stats.skipped_questions;
      }
      for (std::size_t j = 0; j < rows.size(); ++j) {
        const Vector& v = t_base[rows[j]];
        std::copy(v.begin(), v.end(), xt.row(j).begin());
      }
      Gradients grads;
      double loss = batch_contrastive_loss(xq, xt, pos, encoder, &grads);
      if (grads.empty()) continue;
      adamw_step(params, grads, state, config.lr, config.weight_decay);
      sum += loss;
      ++batches;
    }
    stats.curve.push_back(batches ? sum / static_cast<double>(batches) : 0.0);
  }
  return stats;
}

std::vector<HitMetrics> retrieval_metrics(const std::vector<QARecord>& records, const TripletCorpus& corpus,
                                          const RetrievalIndex& index, const DualEncoder& encoder,
                                          const std::vector<std::size_t>& ks) {
  std::vector<HitMetrics> out;
  if (ks.empty()) return out;
  std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  for (std::size_t k : ks) out.push_back({k, 0, 0, 0});
  std::vector<std::string> questions;
  std::vector<const QARecord*> used;
  for (const auto& r : records) {
    if (corpus.reasons(r).empty()) continue;
    used.push_back(&r);
    questions.push_back(r.question);
  }
  if (used.empty()) return out;
  Matrix q = encoder.encode_questions(questions);
  for (std::size_t i = 0; i < used.size(); ++i) {
    auto gt = corpus.ground_truth(*used[i]);
    auto pool = corpus.candidates(*used[i]);
    auto ranked = index.topk(q.row(i), kmax, &pool).ids();
    for (auto& m : out) {
      std::size_t upto = std::min(m.k, ranked.size());
      std::size_t hits = 0;
      for (std::size_t g : gt)
        hits += std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(upto), g) !=
                ranked.begin() + static_cast<std::ptrdiff_t>(upto);
      m.any_hit += hits > 0;
      m.all_hit += hits == gt.size();
    }
  }
  for (auto& m : out) {
    m.n = used.size();
    m.any_hit /= static_cast<double>(m.n);
    m.all_hit /= static_cast<double>(m.n);
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, Source source, const std::vector<HitMetrics>& rows,
                       bool append) {
  bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (header) out << "source,k,any_hit,all_hit,n\n";
  char buf[160];
  for (const auto& m : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%zu\n", std::string(source_name(source)).c_str(), m.k,
                  m.any_hit, m.all_hit, m.n);
    out << buf;
  }
}

}  // namespace kbvqa
