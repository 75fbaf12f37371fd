#pragma once

// Dense row-major linear algebra, softmax/cosine helpers, finite-difference
// gradient checking and the AdamW optimizer. Everything trainable in the
// project (projection heads, reasoner) is expressed with these primitives.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kbvqa {

using Vector = std::vector<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericalDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  std::string shape_string() const;
  Matrix transposed() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
// a · bᵀ
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// aᵀ · b
Matrix matmul_at(const Matrix& a, const Matrix& b);

// m · v
Vector matvec(const Matrix& m, std::span<const double> v);
// mᵀ · v
Vector matvec_t(const Matrix& m, std::span<const double> v);
// m += scale · u vᵀ
void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v, double scale = 1.0);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
// y += a · x
void axpy(double a, std::span<const double> x, std::span<double> y);

Vector softmax(std::span<const double> v);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Throws NumericalDomainError if any entry is NaN or infinite.
void require_finite(std::span<const double> v, const char* what);

// A set of trainable blocks, referenced by pointer so optimizers update the
// owner in place.
using ParamRefs = std::vector<Matrix*>;
using Gradients = std::vector<Matrix>;

Gradients zeros_like(const ParamRefs& params);

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every entry; otherwise a seeded sample of this many per block.
  std::size_t max_entries_per_block = 0;
  std::uint64_t seed = 0;
};

// Max over checked entries of |analytic - central| / max(1, |central|).
// `loss` is re-evaluated with params perturbed in place; params are restored.
double grad_check(const std::function<double()>& loss, const ParamRefs& params,
                  const Gradients& analytic, const GradCheckOptions& options = {});

struct AdamWState {
  Gradients first_moment;
  Gradients second_moment;
  std::int64_t step = 0;
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamWState make_adamw_state(const ParamRefs& params);

void adamw_step(const ParamRefs& params, const Gradients& grads, AdamWState& state, double lr,
                double weight_decay, const AdamWHyper& hyper = {});

// Seeded generator with platform-independent derived distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

}  // namespace kbvqa
