#include "kbvqa/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace kbvqa {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_bt", a, b);
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_mismatch("matmul_at", a, b);
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* br = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

Vector matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: incompatible shapes " + m.shape_string() + " and " +
                         std::to_string(v.size()) + "x1");
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

Vector matvec_t(const Matrix& m, std::span<const double> v) {
  if (m.rows() != v.size()) {
    throw DimensionError("matvec_t: incompatible shapes " + m.shape_string() + "^T and " +
                         std::to_string(v.size()) + "x1");
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) axpy(v[i], m.row(i), out);
  return out;
}

void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v, double scale) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw DimensionError("add_outer: " + m.shape_string() + " vs " + std::to_string(u.size()) + "x" +
                         std::to_string(v.size()));
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double s = scale * u[i];
    if (s == 0.0) continue;
    axpy(s, v, m.row(i));
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  // Four accumulators keep the loop vectorizable without -ffast-math.
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  const std::size_t n = a.size();
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("axpy: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(y.size()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

Vector softmax(std::span<const double> v) {
  if (v.empty()) throw EmptyInputError("softmax of an empty vector");
  require_finite(v, "softmax input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  }
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_similarity of a zero-norm vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalDomainError(std::string(what) + " contains a non-finite value");
  }
}

Gradients zeros_like(const ParamRefs& params) {
  Gradients g;
  g.reserve(params.size());
  for (const Matrix* p : params) g.emplace_back(p->rows(), p->cols());
  return g;
}

double grad_check(const std::function<double()>& loss, const ParamRefs& params,
                  const Gradients& analytic, const GradCheckOptions& options) {
  if (params.size() != analytic.size()) {
    throw DimensionError("grad_check: " + std::to_string(params.size()) + " parameter blocks but " +
                         std::to_string(analytic.size()) + " gradient blocks");
  }
  if (!(options.step > 0.0 && options.step <= 1e-3)) {
    throw std::invalid_argument("grad_check: step must lie in (0, 1e-3]");
  }
  Rng rng(options.seed);
  double worst = 0.0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    Matrix& p = *params[b];
    if (!p.same_shape(analytic[b])) {
      throw DimensionError("grad_check: block " + std::to_string(b) + " is " + p.shape_string() +
                           " but its gradient is " + analytic[b].shape_string());
    }
    std::vector<std::size_t> entries(p.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (options.max_entries_per_block != 0 && entries.size() > options.max_entries_per_block) {
      rng.shuffle(entries);
      entries.resize(options.max_entries_per_block);
    }
    auto values = p.values();
    for (std::size_t idx : entries) {
      const double saved = values[idx];
      values[idx] = saved + options.step;
      const double up = loss();
      values[idx] = saved - options.step;
      const double down = loss();
      values[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalDomainError("grad_check: loss is non-finite at a perturbed point");
      }
      const double central = (up - down) / (2.0 * options.step);
      const double err = std::abs(analytic[b].values()[idx] - central) / std::max(1.0, std::abs(central));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

AdamWState make_adamw_state(const ParamRefs& params) {
  return AdamWState{zeros_like(params), zeros_like(params), 0};
}

void adamw_step(const ParamRefs& params, const Gradients& grads, AdamWState& state, double lr,
                double weight_decay, const AdamWHyper& hyper) {
  if (!(lr > 0.0)) throw std::invalid_argument("adamw_step: learning rate must be positive");
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DimensionError("adamw_step: parameter, gradient and state block counts differ");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t b = 0; b < params.size(); ++b) {
    Matrix& p = *params[b];
    if (!p.same_shape(grads[b]) || !p.same_shape(state.first_moment[b])) {
      throw DimensionError("adamw_step: block " + std::to_string(b) + " is " + p.shape_string() +
                           " but its gradient is " + grads[b].shape_string());
    }
    auto w = p.values();
    auto g = grads[b].values();
    auto m = state.first_moment[b].values();
    auto v = state.second_moment[b].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + hyper.eps) + weight_decay * w[i]);
    }
  }
}

Rng::Rng(std::uint64_t seed) : state_(seed) {}

// splitmix64
std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  return static_cast<std::size_t>(next_u64() % n);
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  have_spare_ = true;
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = stddev * rng.normal();
  return m;
}

}  // namespace kbvqa
