#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kbvqa/dataset.hpp"
#include "kbvqa/encoder.hpp"
#include "kbvqa/knowledge_store.hpp"
#include "kbvqa/numerics.hpp"

namespace kbvqa {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Sum over positives and negatives of [cos(q,t-) - cos(q,t+)].
double contrastive_loss(std::span<const double> q, const std::vector<Vector>& positives,
                        const std::vector<Vector>& negatives);

// Question tower and triplet tower over one frozen base embedder. Without heads
// both towers return the L2-normalized base vector (the unsupervised baseline).
struct DualEncoder {
  BaseEmbedder base{256, 0};
  std::optional<ProjectionHead> question_head;
  std::optional<ProjectionHead> triplet_head;

  static DualEncoder baseline(const BaseEmbedder& base);
  static DualEncoder with_heads(const BaseEmbedder& base, std::size_t hidden, std::size_t dim,
                                std::uint64_t seed, bool near_identity = true);

  std::size_t dim() const;
  Matrix encode_questions(const std::vector<std::string>& texts) const;
  Matrix encode_triplets(const std::vector<std::string>& verbalized) const;

  void save(const std::filesystem::path& dir, const std::string& stem) const;
  static DualEncoder load(const std::filesystem::path& dir, const std::string& stem, const BaseEmbedder& base);
};

// All triplets one retriever can return: the KB, or every scene graph laid
// end to end. Candidate pools for a record are row ranges / subsets of it.
class TripletCorpus {
 public:
  // `kb` must outlive the corpus. Scene graphs provide the image tags.
  static TripletCorpus from_kb(const KnowledgeGraph& kb, const std::vector<SceneGraph>& scenes, int hops = 2);
  static TripletCorpus from_scenes(const std::vector<SceneGraph>& scenes);

  Source source() const { return source_; }
  std::size_t size() const { return triplets_.size(); }
  const TripletText& triplet(std::size_t i) const { return triplets_.at(i); }
  const std::string& verbalized(std::size_t i) const { return verbalized_.at(i); }
  const std::vector<std::string>& verbalized() const { return verbalized_; }

  // KB: 2-hop subgraph seeded by question keywords and the image's objects
  // (full KB when nothing matches). SG: the image's scene graph.
  std::vector<std::size_t> candidates(const QARecord& r) const;
  // Rows of the record's reason triplets for this source; throws if one is absent.
  std::vector<std::size_t> ground_truth(const QARecord& r) const;
  std::optional<std::size_t> find(const TripletText& t, const std::string& image_id) const;

  const std::vector<TripletText>& reasons(const QARecord& r) const {
    return source_ == Source::KB ? r.reason_kb : r.reason_sg;
  }

 private:
  Source source_ = Source::KB;
  int hops_ = 2;
  std::vector<TripletText> triplets_;
  std::vector<std::string> verbalized_;
  const KnowledgeGraph* kb_ = nullptr;
  std::map<std::string, std::pair<std::size_t, std::size_t>> image_rows_;
  std::map<std::string, std::vector<EntityId>> image_tags_;
};

struct RetrievalResult {
  std::vector<std::pair<std::size_t, double>> ranked;  // (triplet row, cosine)
  std::size_t k = 0;

  std::vector<std::size_t> ids() const;
};

class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(const TripletCorpus& corpus, const DualEncoder& encoder);
  // Precomputed rows, one per triplet.
  RetrievalIndex(Source source, Matrix embeddings) : source_(source), embeddings_(std::move(embeddings)) {}

  Source source() const { return source_; }
  std::size_t size() const { return embeddings_.rows(); }
  const Matrix& embeddings() const { return embeddings_; }

  // Ranks `candidates` (all rows when empty) by cosine to q; ties by ascending row.
  RetrievalResult topk(std::span<const double> q, std::size_t k,
                       const std::vector<std::size_t>* candidates = nullptr) const;

 private:
  Source source_ = Source::KB;
  Matrix embeddings_;
};

RetrievalResult retrieve_topk(const std::string& question, const RetrievalIndex& index,
                              const DualEncoder& encoder, std::size_t k,
                              const std::vector<std::size_t>* candidates = nullptr);

struct RetrieverConfig {
  int epochs = 200;
  std::size_t batch = 256;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

struct TrainStats {
  std::vector<double> curve;  // per-epoch mean loss
  std::size_t skipped_batches = 0;
  std::size_t skipped_questions = 0;
};

// Records without reasons for the corpus source are ignored.
TrainStats train_retriever(const std::vector<QARecord>& train, const TripletCorpus& corpus,
                           DualEncoder& encoder, const RetrieverConfig& config);

// Mean in-batch contrastive loss and its gradients w.r.t. both heads' parameters
// (question head blocks first). Exposed for gradient checking.
double batch_contrastive_loss(const Matrix& question_base, const Matrix& triplet_base,
                              const std::vector<std::vector<std::size_t>>& positives,
                              const DualEncoder& encoder, Gradients* grads);

struct HitMetrics {
  std::size_t k = 0;
  double any_hit = 0;
  double all_hit = 0;
  std::size_t n = 0;
};

// Per-record retrieval over the corpus' candidate pools, for every record
// that has reasons for this source.
std::vector<HitMetrics> retrieval_metrics(const std::vector<QARecord>& records, const TripletCorpus& corpus,
                                          const RetrievalIndex& index, const DualEncoder& encoder,
                                          const std::vector<std::size_t>& ks);

void write_metrics_csv(const std::filesystem::path& path, Source source, const std::vector<HitMetrics>& rows,
                       bool append = false);

}  // namespace kbvqa
