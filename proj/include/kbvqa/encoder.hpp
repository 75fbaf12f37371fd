#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kbvqa/knowledge_store.hpp"
#include "kbvqa/numerics.hpp"

namespace kbvqa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Pooling { Mean, Sum };

// Frozen text embedding. Hashed mode: character 3-grams of "#token#" are
// feature-hashed into `dim` signed buckets, each token vector is L2-normalized,
// and token vectors are pooled. File mode looks tokens up in a table and falls
// back to the hashed vector for unknown tokens.
class BaseEmbedder {
 public:
  explicit BaseEmbedder(std::size_t dim = 256, std::uint64_t seed = 0, Pooling pooling = Pooling::Mean);

  static BaseEmbedder from_file(const std::filesystem::path& path, std::uint64_t seed = 0,
                                Pooling pooling = Pooling::Mean);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  bool file_backed() const { return !table_.empty(); }

  Vector token_vector(std::string_view token) const;
  Vector embed(std::string_view text) const;
  Matrix embed_batch(const std::vector<std::string>& texts) const;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  Pooling pooling_;
  std::unordered_map<std::string, Vector> table_;
};

// y = normalize(W2 · relu(W1 · x + b1) + b2). Biases are stored as column matrices.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t d_base, std::size_t hidden, std::size_t dim);

  static ProjectionHead random(std::size_t d_base, std::size_t hidden, std::size_t dim, Rng& rng);
  // Starts as a norm-preserving pass-through of the base vector (hidden must equal d_base);
  // with dim < d_base the second layer is a scaled Gaussian projection.
  static ProjectionHead near_identity(std::size_t d_base, std::size_t hidden, std::size_t dim, Rng& rng,
                                      double offset = 1.0);

  std::size_t d_base() const { return w1.cols(); }
  std::size_t hidden() const { return w1.rows(); }
  std::size_t dim() const { return w2.rows(); }

  ParamRefs params() { return {&w1, &b1, &w2, &b2}; }

  struct Cache {
    Matrix input;
    Matrix pre;     // W1 x + b1
    Matrix act;     // relu(pre)
    Matrix output;  // normalized rows
    Vector norms;   // pre-normalization row norms
  };

  // Rows of `x` are base vectors. Rows whose projection is exactly zero stay zero.
  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  // Accumulates parameter gradients for d loss / d output into `grads`.
  void backward(const Cache& cache, const Matrix& d_output, Gradients& grads) const;

  void save(const std::filesystem::path& path) const;
  static ProjectionHead load(const std::filesystem::path& path);

  bool operator==(const ProjectionHead&) const = default;

  Matrix w1, b1, w2, b2;
};

Vector encode(std::string_view text, const BaseEmbedder& embedder, const ProjectionHead& head);
Vector encode_triplet(const Triplet& t, const KnowledgeGraph& graph, const BaseEmbedder& embedder,
                      const ProjectionHead& head);
Matrix encode_batch(const std::vector<std::string>& texts, const BaseEmbedder& embedder,
                    const ProjectionHead& head);

}  // namespace kbvqa
