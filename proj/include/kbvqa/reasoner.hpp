#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kbvqa/dataset.hpp"
#include "kbvqa/encoder.hpp"
#include "kbvqa/numerics.hpp"
#include "kbvqa/retriever.hpp"

namespace kbvqa {

enum class SourceMode { Ret, GT, None };

std::string_view mode_name(SourceMode m);
SourceMode parse_mode(std::string_view s);

enum class ReasonerInit { Structured, Random };

struct ReasonerInput {
  Vector question;
  Matrix kb;  // rows are triplet features; may have zero rows
  Matrix sg;
  // Set when both sources are disabled: the integration layer sees [question; caption].
  std::optional<Vector> caption;
};

// Single-head scaled dot-product attention; empty set -> zero vector.
Vector attention(std::span<const double> query, const Matrix& set, const Matrix& wq, const Matrix& wk,
                 const Matrix& wv);

struct ReasonerParams {
  std::size_t dim = 0;
  int layers = 0;
  bool residual = false;
  // Index layer * 2 + source, source 0 = KB, 1 = SG.
  std::vector<Matrix> wq, wk, wv;
  Matrix w_int, b_int;  // D x 2D, D x 1
  Matrix w_cls, b_cls;  // V x D, V x 1

  static ReasonerParams random(std::size_t dim, int layers, std::size_t classes, bool residual, Rng& rng);
  // Starts near a readout where the answer feature is the reason features
  // minus the question features; `answer_features` rows are per-class features.
  // `retrieved_sets` switches to a single sharp hop with a small value scale, which
  // keeps an entity shared by both branches from outvoting the answer.
  static ReasonerParams structured(std::size_t dim, int layers, const Matrix& answer_features, bool residual,
                                   Rng& rng, bool retrieved_sets = false);

  std::size_t classes() const { return w_cls.rows(); }
  ParamRefs params();
  std::vector<std::string> block_names() const;

  void save(const std::filesystem::path& path, std::uint64_t vocab_hash) const;
  static ReasonerParams load(const std::filesystem::path& path, std::uint64_t expected_vocab_hash);
};

Vector reasoner_forward(const ReasonerInput& input, const ReasonerParams& params);

// Cross-entropy of `gold` plus parameter gradients accumulated into `grads` (scaled by `scale`).
double reasoner_loss(const ReasonerInput& input, std::size_t gold, const ReasonerParams& params,
                     Gradients* grads, double scale = 1.0);

std::size_t argmax_class(const Vector& logits);

// Frozen features for the reasoner: hashed token sums at the reasoner width.
BaseEmbedder reasoner_features(std::size_t dim, std::uint64_t seed = 1);

struct RetrievalSource {
  const TripletCorpus* corpus = nullptr;
  const DualEncoder* encoder = nullptr;
  const RetrievalIndex* index = nullptr;
};

class InputBuilder {
 public:
  InputBuilder(BaseEmbedder features, SourceMode kb_mode, SourceMode sg_mode, std::size_t top_k = 10);

  void attach(Source source, RetrievalSource retrieval);

  SourceMode mode(Source s) const { return s == Source::KB ? kb_mode_ : sg_mode_; }
  // Retrieval results stay cached across mode changes.
  void set_modes(SourceMode kb, SourceMode sg) {
    kb_mode_ = kb;
    sg_mode_ = sg;
  }
  std::size_t top_k() const { return top_k_; }

  ReasonerInput build(const QARecord& r) const;
  // Verbalized triplets the builder feeds for this source (empty for None).
  std::vector<std::string> knowledge(const QARecord& r, Source s) const;

 private:
  const Vector& feature(const std::string& text) const;

  BaseEmbedder features_;
  SourceMode kb_mode_, sg_mode_;
  std::size_t top_k_;
  RetrievalSource kb_, sg_;
  mutable std::unordered_map<std::string, Vector> cache_;
  mutable std::unordered_map<std::string, std::vector<std::string>> retrieved_[2];
};

struct ReasonerConfig {
  std::size_t dim = 128;
  int layers = 4;
  bool residual = false;
  std::size_t top_k = 10;
  ReasonerInit init = ReasonerInit::Structured;
  // With a validation set, the parameters of the best validation epoch are returned.
  int epochs = 200;
  std::size_t batch = 256;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

struct ReasonerTrainStats {
  std::vector<double> curve;
  std::vector<double> val_accuracy;  // empty without a validation set
  int best_epoch = 0;                // 0 = the initial parameters were kept
  std::size_t skipped_records = 0;
};

ReasonerParams init_reasoner(const ReasonerConfig& config, const AnswerVocab& vocab, const BaseEmbedder& features,
                             bool retrieved_sets = false);

ReasonerTrainStats train_reasoner(const std::vector<QARecord>& train, const InputBuilder& builder,
                                  const AnswerVocab& vocab, ReasonerParams& params, const ReasonerConfig& config,
                                  const std::function<void(int, double)>& on_epoch = {},
                                  const std::vector<QARecord>* validation = nullptr);

// Top-1 accuracy against gold answers (answers outside the vocabulary count as wrong).
double reasoner_accuracy(const std::vector<QARecord>& records, const InputBuilder& builder,
                         const ReasonerParams& params, const AnswerVocab& vocab);

std::string predict(const QARecord& r, const InputBuilder& builder, const ReasonerParams& params,
                    const AnswerVocab& vocab);

}  // namespace kbvqa
