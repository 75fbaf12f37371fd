#include "kbvqa/encoder.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "matrix_json.hpp"
#include "kbvqa/text.hpp"

namespace kbvqa {

using nlohmann::json;

BaseEmbedder::BaseEmbedder(std::size_t dim, std::uint64_t seed, Pooling pooling)
    : dim_(dim), seed_(seed), pooling_(pooling) {
  if (dim == 0) throw DimensionError("embedding dimension must be positive");
}

BaseEmbedder BaseEmbedder::from_file(const std::filesystem::path& path, std::uint64_t seed,
                                     Pooling pooling) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::size_t vocab = 0, dim = 0;
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  if (!(hs >> vocab >> dim) || dim == 0) throw ParseError("expected '<vocab_size> <dim>' header", 1);
  BaseEmbedder e(dim, seed, pooling);
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    Vector v(dim);
    for (std::size_t i = 0; i < dim; ++i)
      if (!(ls >> v[i])) throw ParseError("token '" + tok + "' has fewer than dim values", lineno);
    require_finite(v, "token embedding");
    e.table_[tok] = std::move(v);
  }
  if (e.table_.size() != vocab)
    throw ParseError("header declares " + std::to_string(vocab) + " tokens, file has " +
                         std::to_string(e.table_.size()),
                     lineno);
  return e;
}

Vector BaseEmbedder::token_vector(std::string_view token) const {
  if (!table_.empty()) {
    auto it = table_.find(std::string(token));
    if (it != table_.end()) return it->second;
  }
  Vector v(dim_, 0.0);
  std::string padded = "#" + std::string(token) + "#";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint64_t h = fnv1a64(std::string_view(padded).substr(i, 3), seed_);
    v[h % dim_] += (h >> 63) ? 1.0 : -1.0;
  }
  double n = norm(v);
  if (n > 0)
    for (double& x : v) x /= n;
  return v;
}

Vector BaseEmbedder::embed(std::string_view text) const {
  Vector out(dim_, 0.0);
  auto tokens = tokenize(text);
  if (tokens.empty()) return out;
  for (const auto& t : tokens) axpy(1.0, token_vector(t), out);
  if (pooling_ == Pooling::Mean) {
    double inv = 1.0 / static_cast<double>(tokens.size());
    for (double& x : out) x *= inv;
  }
  return out;
}

Matrix BaseEmbedder::embed_batch(const std::vector<std::string>& texts) const {
  Matrix m(texts.size(), dim_);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Vector v = embed(texts[i]);
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

ProjectionHead::ProjectionHead(std::size_t d_base, std::size_t hidden, std::size_t dim)
    : w1(hidden, d_base), b1(hidden, 1), w2(dim, hidden), b2(dim, 1) {
  if (d_base == 0 || hidden == 0 || dim == 0) throw DimensionError("head dimensions must be positive");
}

ProjectionHead ProjectionHead::random(std::size_t d_base, std::size_t hidden, std::size_t dim, Rng& rng) {
  ProjectionHead h(d_base, hidden, dim);
  h.w1 = random_normal(hidden, d_base, 1.0 / std::sqrt(static_cast<double>(d_base)), rng);
  h.w2 = random_normal(dim, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  return h;
}

ProjectionHead ProjectionHead::near_identity(std::size_t d_base, std::size_t hidden, std::size_t dim,
                                             Rng& rng, double offset) {
  if (hidden != d_base) throw DimensionError("near-identity head needs hidden == d_base");
  ProjectionHead h(d_base, hidden, dim);
  h.w1 = Matrix::identity(d_base);
  h.b1.fill(offset);
  if (dim == hidden) {
    h.w2 = Matrix::identity(dim);
  } else {
    h.w2 = random_normal(dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  }
  // Cancel the hidden offset so the head is linear in x at the start.
  Vector ones(hidden, offset);
  Vector shift = matvec(h.w2, ones);
  for (std::size_t i = 0; i < dim; ++i) h.b2(i, 0) = -shift[i];
  return h;
}

Matrix ProjectionHead::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != d_base())
    throw DimensionError("head input " + x.shape_string() + " vs W1 " + w1.shape_string());
  Matrix pre = matmul_bt(x, w1);
  for (std::size_t r = 0; r < pre.rows(); ++r)
    for (std::size_t c = 0; c < pre.cols(); ++c) pre(r, c) += b1(c, 0);
  Matrix act = pre;
  for (double& v : act.values()) v = v > 0 ? v : 0.0;
  Matrix out = matmul_bt(act, w2);
  Vector norms(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b2(c, 0);
    double n = norm(row);
    norms[r] = n;
    if (n > 0)
      for (double& v : row) v /= n;
    else
      std::fill(row.begin(), row.end(), 0.0);
  }
  require_finite(out.values(), "projection head output");
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->output = out;
    cache->norms = std::move(norms);
  }
  return out;
}

void ProjectionHead::backward(const Cache& cache, const Matrix& d_output, Gradients& grads) const {
  if (!d_output.same_shape(cache.output))
    throw DimensionError("gradient " + d_output.shape_string() + " vs output " + cache.output.shape_string());
  if (grads.size() != 4) throw DimensionError("head gradients need 4 blocks");
  const std::size_t n = d_output.rows();
  Matrix dz(n, dim());
  for (std::size_t r = 0; r < n; ++r) {
    if (cache.norms[r] == 0) continue;
    auto y = cache.output.row(r);
    auto g = d_output.row(r);
    double yg = dot(y, g);
    for (std::size_t c = 0; c < dim(); ++c) dz(r, c) = (g[c] - y[c] * yg) / cache.norms[r];
  }
  Matrix dw2 = matmul_at(dz, cache.act);
  axpy(1.0, dw2.values(), grads[2].values());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < dim(); ++c) grads[3](c, 0) += dz(r, c);
  Matrix da = matmul(dz, w2);
  for (std::size_t i = 0; i < da.size(); ++i)
    if (cache.pre.values()[i] <= 0) da.values()[i] = 0.0;
  Matrix dw1 = matmul_at(da, cache.input);
  axpy(1.0, dw1.values(), grads[0].values());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < hidden(); ++c) grads[1](c, 0) += da(r, c);
}

namespace {

using detail::matrix_from;
using detail::matrix_json;

constexpr int kHeadFormat = 1;

}  // namespace

void ProjectionHead::save(const std::filesystem::path& path) const {
  json j = {{"format_version", kHeadFormat},
            {"kind", "projection_head"},
            {"d_base", d_base()},
            {"hidden", hidden()},
            {"dim", dim()},
            {"w1", matrix_json(w1)},
            {"b1", matrix_json(b1)},
            {"w2", matrix_json(w2)},
            {"b2", matrix_json(b2)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

ProjectionHead ProjectionHead::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("malformed head checkpoint: ") + e.what());
  }
  if (j.value("kind", "") != "projection_head") throw CheckpointError("not a projection head checkpoint");
  if (j.value("format_version", 0) != kHeadFormat)
    throw CheckpointError("unsupported head checkpoint format version");
  ProjectionHead h;
  h.w1 = matrix_from(j["w1"], "w1");
  h.b1 = matrix_from(j["b1"], "b1");
  h.w2 = matrix_from(j["w2"], "w2");
  h.b2 = matrix_from(j["b2"], "b2");
  if (h.b1.rows() != h.w1.rows() || h.w2.cols() != h.w1.rows() || h.b2.rows() != h.w2.rows() ||
      h.b1.cols() != 1 || h.b2.cols() != 1)
    throw CheckpointError("head checkpoint blocks have inconsistent shapes");
  return h;
}

Vector encode(std::string_view text, const BaseEmbedder& embedder, const ProjectionHead& head) {
  Vector base = embedder.embed(text);
  const std::size_t d = base.size();
  Matrix x(1, d, std::move(base));
  Matrix y = head.forward(x);
  return Vector(y.values().begin(), y.values().end());
}

Vector encode_triplet(const Triplet& t, const KnowledgeGraph& graph, const BaseEmbedder& embedder,
                      const ProjectionHead& head) {
  return encode(graph.verbalize(t), embedder, head);
}

Matrix encode_batch(const std::vector<std::string>& texts, const BaseEmbedder& embedder,
                    const ProjectionHead& head) {
  return head.forward(embedder.embed_batch(texts));
}

}  // namespace kbvqa
