#include "kbvqa/reasoner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "matrix_json.hpp"
#include "kbvqa/text.hpp"

namespace kbvqa {

using nlohmann::json;

std::string_view mode_name(SourceMode m) {
  switch (m) {
    case SourceMode::Ret: return "ret";
    case SourceMode::GT: return "gt";
    case SourceMode::None: return "none";
  }
  return "none";
}

SourceMode parse_mode(std::string_view s) {
  if (s == "ret") return SourceMode::Ret;
  if (s == "gt") return SourceMode::GT;
  if (s == "none" || s == "off") return SourceMode::None;
  throw std::invalid_argument("unknown knowledge mode '" + std::string(s) + "' (ret|gt|none)");
}

namespace {

struct AttCache {
  bool empty = true;
  Vector u, kt, w, sbar;
};

void check_square(const Matrix& m, std::size_t d, const char* what) {
  if (m.rows() != d || m.cols() != d)
    throw DimensionError(std::string(what) + " must be " + std::to_string(d) + "x" + std::to_string(d) + ", got " +
                         m.shape_string());
}

Vector attend(std::span<const double> q, const Matrix& set, const Matrix& wq, const Matrix& wk, const Matrix& wv,
              AttCache& c) {
  const std::size_t d = q.size();
  c.empty = set.rows() == 0;
  if (c.empty) return Vector(wv.rows(), 0.0);
  if (set.cols() != d) throw DimensionError("attention set width " + std::to_string(set.cols()) +
                                            " does not match query width " + std::to_string(d));
  // (Wq q)·(Wk s) = s·(Wkᵀ Wq q), so one pass over the set suffices.
  c.u = matvec(wq, q);
  c.kt = matvec_t(wk, c.u);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Vector scores(set.rows());
  for (std::size_t i = 0; i < set.rows(); ++i) scores[i] = dot(set.row(i), c.kt) * scale;
  c.w = softmax(scores);
  c.sbar.assign(d, 0.0);
  for (std::size_t i = 0; i < set.rows(); ++i) axpy(c.w[i], set.row(i), c.sbar);
  return matvec(wv, c.sbar);
}

// Accumulates into dwq/dwk/dwv and returns d loss / d query.
Vector attend_backward(std::span<const double> q, const Matrix& set, const Matrix& wq, const Matrix& wk,
                       const Matrix& wv, const AttCache& c, std::span<const double> dout, Matrix& dwq, Matrix& dwk,
                       Matrix& dwv, double scale_grad) {
  const std::size_t d = q.size();
  if (c.empty) return Vector(d, 0.0);
  add_outer(dwv, dout, c.sbar, scale_grad);
  Vector dsbar = matvec_t(wv, dout);
  const std::size_t n = set.rows();
  Vector dw(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dw[i] = dot(set.row(i), dsbar);
    mean += c.w[i] * dw[i];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Vector dkt(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(c.w[i] * (dw[i] - mean) * scale, set.row(i), dkt);
  add_outer(dwk, c.u, dkt, scale_grad);
  Vector du = matvec(wk, dkt);
  add_outer(dwq, du, q, scale_grad);
  return matvec_t(wq, du);
}

struct ForwardCache {
  std::vector<Vector> queries;       // query_0 .. query_{L-1}
  std::vector<AttCache> att;         // layer * 2 + source
  Vector x, pre, h, logits;
};

Vector forward_impl(const ReasonerInput& in, const ReasonerParams& p, ForwardCache& c) {
  const std::size_t d = p.dim;
  if (in.question.size() != d)
    throw DimensionError("question width " + std::to_string(in.question.size()) + " != reasoner width " +
                         std::to_string(d));
  c.x.assign(2 * d, 0.0);
  if (in.caption) {
    if (in.caption->size() != d) throw DimensionError("caption width does not match reasoner width");
    std::copy(in.question.begin(), in.question.end(), c.x.begin());
    std::copy(in.caption->begin(), in.caption->end(), c.x.begin() + static_cast<std::ptrdiff_t>(d));
  } else {
    c.queries.assign(static_cast<std::size_t>(p.layers), {});
    c.att.assign(static_cast<std::size_t>(p.layers) * 2, {});
    Vector q = in.question;
    for (int l = 0; l < p.layers; ++l) {
      auto li = static_cast<std::size_t>(l);
      c.queries[li] = q;
      Vector a = attend(q, in.kb, p.wq[li * 2], p.wk[li * 2], p.wv[li * 2], c.att[li * 2]);
      Vector b = attend(q, in.sg, p.wq[li * 2 + 1], p.wk[li * 2 + 1], p.wv[li * 2 + 1], c.att[li * 2 + 1]);
      if (l == p.layers - 1) {
        for (std::size_t i = 0; i < d; ++i) {
          c.x[i] = a[i] + (p.residual ? q[i] : 0.0);
          c.x[d + i] = b[i] + (p.residual ? q[i] : 0.0);
        }
      }
      Vector next(d);
      for (std::size_t i = 0; i < d; ++i) next[i] = (p.residual ? q[i] : 0.0) + a[i] + b[i];
      q = std::move(next);
    }
  }
  c.pre = matvec(p.w_int, c.x);
  for (std::size_t i = 0; i < c.pre.size(); ++i) c.pre[i] += p.b_int(i, 0);
  c.h.resize(c.pre.size());
  for (std::size_t i = 0; i < c.pre.size(); ++i) c.h[i] = std::max(0.0, c.pre[i]);
  c.logits = matvec(p.w_cls, c.h);
  for (std::size_t i = 0; i < c.logits.size(); ++i) c.logits[i] += p.b_cls(i, 0);
  return c.logits;
}

std::size_t block_index(std::size_t layer, std::size_t source, std::size_t which) {
  return (layer * 2 + source) * 3 + which;
}

}  // namespace

Vector attention(std::span<const double> query, const Matrix& set, const Matrix& wq, const Matrix& wk,
                 const Matrix& wv) {
  const std::size_t d = query.size();
  check_square(wq, d, "Wq");
  check_square(wk, d, "Wk");
  check_square(wv, d, "Wv");
  AttCache c;
  return attend(query, set, wq, wk, wv, c);
}

ReasonerParams ReasonerParams::random(std::size_t dim, int layers, std::size_t classes, bool residual, Rng& rng) {
  if (dim == 0 || classes == 0) throw DimensionError("reasoner needs positive width and class count");
  if (layers < 1) throw std::invalid_argument("reasoner needs at least one layer");
  ReasonerParams p;
  p.dim = dim;
  p.layers = layers;
  p.residual = residual;
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int i = 0; i < layers * 2; ++i) {
    p.wq.push_back(random_normal(dim, dim, sd, rng));
    p.wk.push_back(random_normal(dim, dim, sd, rng));
    p.wv.push_back(random_normal(dim, dim, sd, rng));
  }
  p.w_int = random_normal(dim, 2 * dim, 1.0 / std::sqrt(2.0 * static_cast<double>(dim)), rng);
  p.b_int = Matrix(dim, 1);
  p.w_cls = random_normal(classes, dim, sd, rng);
  p.b_cls = Matrix(classes, 1);
  return p;
}

ReasonerParams ReasonerParams::structured(std::size_t dim, int layers, const Matrix& answer_features, bool residual,
                                          Rng& rng, bool retrieved_sets) {
  if (answer_features.cols() != dim) throw DimensionError("answer features must have the reasoner width");
  ReasonerParams p = random(dim, layers, answer_features.rows(), residual, rng);
  constexpr double kNoise = 0.01, kSharp = 7.5, kFirstValue = 3.0, kSecondValue = -5.0;
  constexpr double kClassScale = 5.0, kBias = 1.0, kRetrievedValue = -0.7;
  auto noisy = [&](double diag) {
    Matrix m = random_normal(dim, dim, kNoise, rng);
    for (std::size_t i = 0; i < dim; ++i) m(i, i) += diag;
    return m;
  };
  // Layer one attends sharply to the triplet closest to the question; layer two
  // averages and subtracts, which for chains removes the shared bridge entity.
  // Retrieved sets are larger than a chain, so the average would be mostly noise there.
  for (int l = 0; l < layers; ++l) {
    for (std::size_t s = 0; s < 2; ++s) {
      auto i = static_cast<std::size_t>(l) * 2 + s;
      p.wq[i] = noisy(l == 0 ? kSharp : 0.0);
      p.wk[i] = noisy(l == 0 ? kSharp : 0.0);
      if (retrieved_sets)
        p.wv[i] = noisy(l == 0 ? kRetrievedValue : 0.0);
      else
        p.wv[i] = noisy(l == 0 ? kFirstValue : (l == 1 ? kSecondValue : 0.0));
    }
  }
  p.w_int = random_normal(dim, 2 * dim, kNoise, rng);
  for (std::size_t i = 0; i < dim; ++i) {
    p.w_int(i, i) -= 0.5;
    p.w_int(i, dim + i) -= 0.5;
    p.b_int(i, 0) = kBias;
  }
  for (std::size_t c = 0; c < answer_features.rows(); ++c) {
    double n = norm(answer_features.row(c));
    double sum = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      p.w_cls(c, j) = n > 0 ? kClassScale * answer_features(c, j) / n : 0.0;
      sum += p.w_cls(c, j);
    }
    p.b_cls(c, 0) = -kBias * sum;
  }
  return p;
}

ParamRefs ReasonerParams::params() {
  ParamRefs refs;
  for (std::size_t i = 0; i < wq.size(); ++i) {
    refs.push_back(&wq[i]);
    refs.push_back(&wk[i]);
    refs.push_back(&wv[i]);
  }
  refs.insert(refs.end(), {&w_int, &b_int, &w_cls, &b_cls});
  return refs;
}

std::vector<std::string> ReasonerParams::block_names() const {
  std::vector<std::string> names;
  for (int l = 0; l < layers; ++l)
    for (const char* s : {"kb", "sg"})
      for (const char* w : {"wq", "wk", "wv"}) names.push_back("layer" + std::to_string(l + 1) + "." + s + "." + w);
  names.insert(names.end(), {"integration.w", "integration.b", "classifier.w", "classifier.b"});
  return names;
}

namespace {
constexpr int kReasonerFormat = 1;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}
}  // namespace

void ReasonerParams::save(const std::filesystem::path& path, std::uint64_t vocab_hash) const {
  json blocks = json::object();
  auto names = block_names();
  auto refs = const_cast<ReasonerParams*>(this)->params();
  for (std::size_t i = 0; i < refs.size(); ++i) blocks[names[i]] = detail::matrix_json(*refs[i]);
  json j = {{"format_version", kReasonerFormat}, {"kind", "reasoner"},   {"dim", dim},
            {"layers", layers},                  {"residual", residual}, {"vocab_hash", hex64(vocab_hash)},
            {"blocks", blocks}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

ReasonerParams ReasonerParams::load(const std::filesystem::path& path, std::uint64_t expected_vocab_hash) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("malformed reasoner checkpoint: ") + e.what());
  }
  if (j.value("kind", "") != "reasoner") throw CheckpointError("not a reasoner checkpoint");
  if (j.value("format_version", 0) != kReasonerFormat)
    throw CheckpointError("unsupported reasoner checkpoint format version");
  if (j.value("vocab_hash", "") != hex64(expected_vocab_hash))
    throw CheckpointError("reasoner checkpoint was trained with a different answer vocabulary");
  ReasonerParams p;
  p.dim = j.at("dim").get<std::size_t>();
  p.layers = j.at("layers").get<int>();
  p.residual = j.at("residual").get<bool>();
  if (p.layers < 1 || p.dim == 0) throw CheckpointError("reasoner checkpoint has invalid shape fields");
  p.wq.resize(static_cast<std::size_t>(p.layers) * 2);
  p.wk.resize(p.wq.size());
  p.wv.resize(p.wq.size());
  auto names = p.block_names();
  auto refs = p.params();
  const auto& blocks = j.at("blocks");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!blocks.contains(names[i])) throw CheckpointError("reasoner checkpoint lacks block " + names[i]);
    *refs[i] = detail::matrix_from(blocks[names[i]], names[i]);
  }
  const std::size_t d = p.dim;
  for (std::size_t i = 0; i < p.wq.size(); ++i)
    if (!p.wq[i].same_shape(Matrix(d, d)) || !p.wk[i].same_shape(Matrix(d, d)) || !p.wv[i].same_shape(Matrix(d, d)))
      throw CheckpointError("attention block has wrong shape");
  if (p.w_int.rows() != d || p.w_int.cols() != 2 * d || p.b_int.rows() != d || p.w_cls.cols() != d ||
      p.b_cls.rows() != p.w_cls.rows())
    throw CheckpointError("reasoner checkpoint blocks have inconsistent shapes");
  return p;
}

Vector reasoner_forward(const ReasonerInput& input, const ReasonerParams& params) {
  ForwardCache c;
  return forward_impl(input, params, c);
}

double reasoner_loss(const ReasonerInput& input, std::size_t gold, const ReasonerParams& p, Gradients* grads,
                     double scale) {
  if (gold >= p.classes()) throw std::out_of_range("gold class outside the classifier");
  ForwardCache c;
  forward_impl(input, p, c);
  Vector prob = softmax(c.logits);
  double loss = -std::log(std::max(prob[gold], 1e-300));
  if (!grads) return loss;

  const std::size_t d = p.dim;
  const std::size_t nb = static_cast<std::size_t>(p.layers) * 6;
  auto& g = *grads;
  Vector dlogits = prob;
  dlogits[gold] -= 1.0;
  add_outer(g[nb + 2], dlogits, c.h, scale);
  axpy(scale, dlogits, g[nb + 3].values());
  Vector dh = matvec_t(p.w_cls, dlogits);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (c.pre[i] <= 0) dh[i] = 0.0;
  add_outer(g[nb], dh, c.x, scale);
  axpy(scale, dh, g[nb + 1].values());
  if (input.caption) return loss;

  Vector dx = matvec_t(p.w_int, dh);
  Vector dout_kb(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(d));
  Vector dout_sg(dx.begin() + static_cast<std::ptrdiff_t>(d), dx.end());
  Vector dq(d, 0.0);
  if (p.residual)
    for (std::size_t i = 0; i < d; ++i) dq[i] = dout_kb[i] + dout_sg[i];
  for (int l = p.layers - 1; l >= 0; --l) {
    auto li = static_cast<std::size_t>(l);
    const Vector& q = c.queries[li];
    Vector from_kb = attend_backward(q, input.kb, p.wq[li * 2], p.wk[li * 2], p.wv[li * 2], c.att[li * 2], dout_kb,
                                     g[block_index(li, 0, 0)], g[block_index(li, 0, 1)], g[block_index(li, 0, 2)],
                                     scale);
    Vector from_sg = attend_backward(q, input.sg, p.wq[li * 2 + 1], p.wk[li * 2 + 1], p.wv[li * 2 + 1],
                                     c.att[li * 2 + 1], dout_sg, g[block_index(li, 1, 0)], g[block_index(li, 1, 1)],
                                     g[block_index(li, 1, 2)], scale);
    for (std::size_t i = 0; i < d; ++i) dq[i] += from_kb[i] + from_sg[i];
    // dq is now d loss / d query_l, which both attention outputs of layer l-1 feed.
    dout_kb = dq;
    dout_sg = dq;
    if (!p.residual) std::fill(dq.begin(), dq.end(), 0.0);
  }
  return loss;
}

std::size_t argmax_class(const Vector& logits) {
  if (logits.empty()) throw EmptyInputError("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

BaseEmbedder reasoner_features(std::size_t dim, std::uint64_t seed) { return BaseEmbedder(dim, seed, Pooling::Sum); }

InputBuilder::InputBuilder(BaseEmbedder features, SourceMode kb_mode, SourceMode sg_mode, std::size_t top_k)
    : features_(std::move(features)), kb_mode_(kb_mode), sg_mode_(sg_mode), top_k_(top_k) {
  if (top_k_ == 0) throw std::invalid_argument("top_k must be positive");
}

void InputBuilder::attach(Source source, RetrievalSource retrieval) {
  if (!retrieval.corpus || !retrieval.encoder || !retrieval.index)
    throw std::invalid_argument("retrieval source needs corpus, encoder and index");
  if (retrieval.corpus->source() != source) throw std::invalid_argument("corpus source does not match");
  (source == Source::KB ? kb_ : sg_) = retrieval;
  retrieved_[source == Source::KB ? 0 : 1].clear();
}

const Vector& InputBuilder::feature(const std::string& text) const {
  auto it = cache_.find(text);
  if (it == cache_.end()) it = cache_.emplace(text, features_.embed(text)).first;
  return it->second;
}

std::vector<std::string> InputBuilder::knowledge(const QARecord& r, Source s) const {
  SourceMode m = mode(s);
  if (m == SourceMode::None) return {};
  if (m == SourceMode::GT) {
    std::vector<std::string> out;
    for (const auto& t : s == Source::KB ? r.reason_kb : r.reason_sg) out.push_back(verbalize(t));
    return out;
  }
  const RetrievalSource& src = s == Source::KB ? kb_ : sg_;
  if (!src.corpus) throw std::logic_error(std::string("no ") + std::string(source_name(s)) + " retriever attached");
  auto& memo = retrieved_[s == Source::KB ? 0 : 1];
  if (auto it = memo.find(r.id); it != memo.end()) return it->second;
  auto pool = src.corpus->candidates(r);
  auto result = retrieve_topk(r.question, *src.index, *src.encoder, top_k_, &pool);
  std::vector<std::string> out;
  for (auto row : result.ids()) out.push_back(src.corpus->verbalized(row));
  memo.emplace(r.id, out);
  return out;
}

ReasonerInput InputBuilder::build(const QARecord& r) const {
  ReasonerInput in;
  in.question = feature(r.question);
  const std::size_t d = features_.dim();
  if (kb_mode_ == SourceMode::None && sg_mode_ == SourceMode::None) {
    in.caption = feature(r.caption);
    in.kb = Matrix(0, d);
    in.sg = Matrix(0, d);
    return in;
  }
  auto fill = [&](Source s) {
    auto texts = knowledge(r, s);
    Matrix m(texts.size(), d);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const Vector& v = feature(texts[i]);
      std::copy(v.begin(), v.end(), m.row(i).begin());
    }
    return m;
  };
  in.kb = fill(Source::KB);
  in.sg = fill(Source::SG);
  return in;
}

ReasonerParams init_reasoner(const ReasonerConfig& config, const AnswerVocab& vocab, const BaseEmbedder& features,
                             bool retrieved_sets) {
  if (features.dim() != config.dim) throw DimensionError("feature width must equal reasoner width");
  Rng rng(config.seed);
  if (config.init == ReasonerInit::Random)
    return ReasonerParams::random(config.dim, config.layers, vocab.size(), config.residual, rng);
  return ReasonerParams::structured(config.dim, config.layers, features.embed_batch(vocab.answers()),
                                    config.residual, rng, retrieved_sets);
}

ReasonerTrainStats train_reasoner(const std::vector<QARecord>& train, const InputBuilder& builder,
                                  const AnswerVocab& vocab, ReasonerParams& params, const ReasonerConfig& config,
                                  const std::function<void(int, double)>& on_epoch,
                                  const std::vector<QARecord>* validation) {
  if (params.classes() != vocab.size()) throw DimensionError("classifier width must equal vocabulary size");
  if (config.batch == 0) throw std::invalid_argument("batch must be positive");
  ReasonerTrainStats stats;
  std::vector<std::pair<std::size_t, std::size_t>> usable;  // (record, class)
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (auto c = vocab.index_of(train[i].answer)) usable.emplace_back(i, *c);
    else ++stats.skipped_records;
  }
  if (stats.skipped_records > 0)
    std::cerr << "warning: " << stats.skipped_records << " training records have answers outside the vocabulary\n";
  if (usable.empty() || config.epochs <= 0) return stats;

  ParamRefs refs = params.params();
  AdamWState state = make_adamw_state(refs);
  std::optional<ReasonerParams> best;
  double best_acc = -1.0;
  if (validation) {
    best_acc = reasoner_accuracy(*validation, builder, params, vocab);
    best = params;
  }
  Rng rng(config.seed ^ 0xA5A5A5A5ULL);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(usable);
    double total = 0.0;
    for (std::size_t start = 0; start < usable.size(); start += config.batch) {
      std::size_t end = std::min(usable.size(), start + config.batch);
      Gradients grads = zeros_like(refs);
      double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        ReasonerInput in = builder.build(train[usable[b].first]);
        total += reasoner_loss(in, usable[b].second, params, &grads, scale);
      }
      adamw_step(refs, grads, state, config.lr, config.weight_decay);
    }
    double mean = total / static_cast<double>(usable.size());
    if (!std::isfinite(mean)) throw NumericalDomainError("reasoner loss diverged at epoch " + std::to_string(epoch + 1));
    stats.curve.push_back(mean);
    if (validation) {
      double acc = reasoner_accuracy(*validation, builder, params, vocab);
      stats.val_accuracy.push_back(acc);
      if (acc > best_acc) {
        best_acc = acc;
        best = params;
        stats.best_epoch = epoch + 1;
      }
    }
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  if (best) params = std::move(*best);
  else stats.best_epoch = config.epochs;
  return stats;
}

double reasoner_accuracy(const std::vector<QARecord>& records, const InputBuilder& builder,
                         const ReasonerParams& params, const AnswerVocab& vocab) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records)
    if (predict(r, builder, params, vocab) == r.answer) ++correct;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

std::string predict(const QARecord& r, const InputBuilder& builder, const ReasonerParams& params,
                    const AnswerVocab& vocab) {
  return vocab.answer(argmax_class(reasoner_forward(builder.build(r), params)));
}

}  // namespace kbvqa
