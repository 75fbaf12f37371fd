#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "kbvqa/dataset.hpp"
#include "kbvqa/reasoner.hpp"

using namespace kbvqa;

namespace {

ReasonerInput random_input(std::size_t d, std::size_t nkb, std::size_t nsg, Rng& rng) {
  ReasonerInput in;
  in.question = Vector(d);
  for (double& x : in.question) x = rng.normal();
  in.kb = random_normal(nkb, d, 1, rng);
  in.sg = random_normal(nsg, d, 1, rng);
  return in;
}

Matrix permuted_rows(const Matrix& m, Rng& rng) {
  std::vector<std::size_t> order(m.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i)
    std::copy(m.row(order[i]).begin(), m.row(order[i]).end(), out.row(i).begin());
  return out;
}

const std::vector<QARecord>& records() {
  static const std::vector<QARecord> rs = [] {
    WorldSpec s;
    s.n_images = 40;
    return generate_questions(generate_world(s), 8);
  }();
  return rs;
}

}  // namespace

TEST(Attention, SingletonValue) {
  Rng rng(1);
  Matrix wq = random_normal(3, 3, 1, rng), wk = random_normal(3, 3, 1, rng), wv = random_normal(3, 3, 1, rng);
  Matrix set(4, 3);
  for (std::size_t r = 0; r < 4; ++r) set.row(r)[0] = 1, set.row(r)[1] = -2, set.row(r)[2] = 0.5;
  Vector out = attention(Vector{0.3, 0.1, -1}, set, wq, wk, wv);
  Vector want = matvec(wv, Vector{1, -2, 0.5});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(Attention, EmptySetIsZero) {
  Matrix i2 = Matrix::identity(2);
  EXPECT_EQ(attention(Vector{1, 2}, Matrix(0, 2), i2, i2, i2), (Vector{0, 0}));
}

TEST(Attention, HandMixture) {
  Matrix i2 = Matrix::identity(2);
  Matrix set = Matrix::from_rows({{1, 0}, {0, 1}});
  Vector out = attention(Vector{2, 0}, set, i2, i2, i2);
  // scores are (2/sqrt 2, 0)
  double e = std::exp(std::sqrt(2.0));
  EXPECT_NEAR(out[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(out[1], 1 / (e + 1), 1e-15);
}

TEST(Attention, ShapeErrors) {
  Matrix i2 = Matrix::identity(2);
  EXPECT_THROW(attention(Vector{1, 2}, Matrix(1, 3), i2, i2, i2), DimensionError);
  EXPECT_THROW(attention(Vector{1, 2}, Matrix(1, 2), Matrix::identity(3), i2, i2), DimensionError);
}

TEST(Forward, EmptySetsGiveConstantPrior) {
  Rng rng(2);
  auto p = ReasonerParams::random(6, 4, 5, false, rng);
  ReasonerInput a = random_input(6, 0, 0, rng), b = random_input(6, 0, 0, rng);
  Vector la = reasoner_forward(a, p), lb = reasoner_forward(b, p);
  Vector prior = matvec(p.b_int, Vector{1});
  for (double& x : prior) x = std::max(0.0, x);
  Vector want = matvec(p.w_cls, prior);
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_DOUBLE_EQ(la[i], lb[i]);
    EXPECT_NEAR(la[i], want[i] + p.b_cls(i, 0), 1e-12);
  }
}

TEST(Forward, PermutationInvariant) {
  Rng rng(3);
  for (bool residual : {false, true}) {
    auto p = ReasonerParams::random(8, 4, 6, residual, rng);
    for (int trial = 0; trial < 10; ++trial) {
      ReasonerInput in = random_input(8, 1 + rng.below(10), 1 + rng.below(10), rng);
      Vector base = reasoner_forward(in, p);
      ReasonerInput shuffled = in;
      shuffled.kb = permuted_rows(in.kb, rng);
      shuffled.sg = permuted_rows(in.sg, rng);
      Vector got = reasoner_forward(shuffled, p);
      for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(got[i], base[i], 1e-9);
    }
  }
}

TEST(Forward, OneLayerHandCheck) {
  Rng rng(4);
  auto p = ReasonerParams::random(3, 1, 4, false, rng);
  p.wq[0] = p.wk[0] = p.wv[0] = p.wq[1] = p.wk[1] = p.wv[1] = Matrix::identity(3);
  ReasonerInput in;
  in.question = {0.2, -0.4, 1};
  in.kb = Matrix::from_rows({{1, 2, 3}});
  in.sg = Matrix::from_rows({{-1, 0.5, 0}});
  Vector x{1, 2, 3, -1, 0.5, 0};
  Vector h = matvec(p.w_int, x);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h[i] + p.b_int(i, 0));
  Vector want = matvec(p.w_cls, h);
  Vector got = reasoner_forward(in, p);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i] + p.b_cls(i, 0), 1e-12);
}

TEST(Forward, CaptionModeUsesQuestionAndCaption) {
  Rng rng(5);
  auto p = ReasonerParams::random(4, 2, 3, false, rng);
  ReasonerInput in = random_input(4, 0, 0, rng);
  in.caption = Vector{1, 0, -1, 2};
  Vector x = in.question;
  x.insert(x.end(), in.caption->begin(), in.caption->end());
  Vector h = matvec(p.w_int, x);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h[i] + p.b_int(i, 0));
  Vector want = matvec(p.w_cls, h);
  Vector got = reasoner_forward(in, p);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i] + p.b_cls(i, 0), 1e-12);
  in.question.pop_back();
  EXPECT_THROW(reasoner_forward(in, p), DimensionError);
}

TEST(Gradients, EveryBlockReceivesGradient) {
  Rng rng(6);
  for (bool residual : {false, true}) {
    auto p = ReasonerParams::random(8, 4, 5, residual, rng);
    Gradients g = zeros_like(p.params());
    for (int r = 0; r < 8; ++r) reasoner_loss(random_input(8, 3, 4, rng), r % 5, p, &g, 1.0 / 8);
    auto names = p.block_names();
    ASSERT_EQ(names.size(), g.size());
    for (std::size_t b = 0; b < g.size(); ++b) EXPECT_GT(norm(g[b].values()), 0.0) << names[b];
  }
}

TEST(Gradients, TwoRecordBatchGradCheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (bool residual : {false, true}) {
      Rng rng(seed);
      auto p = ReasonerParams::random(6, 4, 5, residual, rng);
      ReasonerInput a = random_input(6, 3, 2, rng), b = random_input(6, 1, 4, rng);
      auto refs = p.params();
      Gradients g = zeros_like(refs);
      reasoner_loss(a, 1, p, &g, 0.5);
      reasoner_loss(b, 3, p, &g, 0.5);
      auto loss = [&] { return 0.5 * (reasoner_loss(a, 1, p, nullptr) + reasoner_loss(b, 3, p, nullptr)); };
      EXPECT_LT(grad_check(loss, refs, g), 1e-4) << "seed " << seed << " residual " << residual;
    }
  }
}

TEST(Gradients, StructuredInitAlsoChecks) {
  Rng rng(9);
  Matrix answers = random_normal(5, 6, 1, rng);
  auto p = ReasonerParams::structured(6, 4, answers, true, rng);
  ReasonerInput a = random_input(6, 2, 2, rng);
  auto refs = p.params();
  Gradients g = zeros_like(refs);
  reasoner_loss(a, 2, p, &g);
  EXPECT_LT(grad_check([&] { return reasoner_loss(a, 2, p, nullptr); }, refs, g), 1e-4);
  EXPECT_THROW(reasoner_loss(a, 5, p, nullptr), std::out_of_range);
}

TEST(Argmax, UniqueMaxAndTies) {
  EXPECT_EQ(argmax_class(Vector{0, 1, 2, 5, 3}), 3u);
  EXPECT_EQ(argmax_class(Vector{0.5, 0.5, 0.5}), 0u);
  EXPECT_EQ(argmax_class(Vector{1, 4, 4}), 1u);
  EXPECT_THROW(argmax_class(Vector{}), EmptyInputError);
}

TEST(Checkpoint, RoundTripAndVocabHashGuard) {
  Rng rng(7);
  auto p = ReasonerParams::random(4, 2, 3, true, rng);
  auto path = std::filesystem::temp_directory_path() / "kbvqa_reasoner.json";
  p.save(path, 0xABCDEFull);
  auto q = ReasonerParams::load(path, 0xABCDEFull);
  EXPECT_EQ(q.layers, 2);
  EXPECT_TRUE(q.residual);
  EXPECT_EQ(q.w_cls, p.w_cls);
  EXPECT_EQ(q.wk[3], p.wk[3]);
  EXPECT_THROW(ReasonerParams::load(path, 0x123ull), CheckpointError);
}

TEST(Builder, ModesShapeTheInput) {
  const auto& rs = records();
  InputBuilder b(reasoner_features(32), SourceMode::GT, SourceMode::GT);
  for (const auto& r : rs) {
    auto in = b.build(r);
    EXPECT_EQ(in.kb.rows(), r.reason_kb.size());
    EXPECT_EQ(in.sg.rows(), r.reason_sg.size());
    EXPECT_FALSE(in.caption);
  }
  const QARecord* two_hop = nullptr;
  for (const auto& r : rs)
    if (r.hops == 2 && r.reason_sg.size() == 2) two_hop = &r;
  ASSERT_TRUE(two_hop);
  EXPECT_EQ(b.knowledge(*two_hop, Source::SG),
            (std::vector<std::string>{verbalize(two_hop->reason_sg[0]), verbalize(two_hop->reason_sg[1])}));

  b.set_modes(SourceMode::None, SourceMode::None);
  auto in = b.build(rs[0]);
  ASSERT_TRUE(in.caption);
  EXPECT_EQ(in.kb.rows(), 0u);
  EXPECT_EQ(*in.caption, reasoner_features(32).embed(rs[0].caption));

  b.set_modes(SourceMode::Ret, SourceMode::None);
  EXPECT_THROW(b.build(rs[0]), std::logic_error);
  EXPECT_THROW(InputBuilder(reasoner_features(8), SourceMode::GT, SourceMode::GT, 0), std::invalid_argument);
}

TEST(Modes, ParseNames) {
  EXPECT_EQ(parse_mode("ret"), SourceMode::Ret);
  EXPECT_EQ(parse_mode("gt"), SourceMode::GT);
  EXPECT_EQ(parse_mode("off"), SourceMode::None);
  EXPECT_EQ(mode_name(SourceMode::None), "none");
  EXPECT_THROW(parse_mode("oracle"), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesParams) {
  const auto& rs = records();
  auto vocab = AnswerVocab::build(rs);
  InputBuilder b(reasoner_features(16), SourceMode::GT, SourceMode::GT);
  ReasonerConfig cfg;
  cfg.dim = 16;
  cfg.epochs = 0;
  auto p = init_reasoner(cfg, vocab, reasoner_features(16));
  auto before = p;
  auto stats = train_reasoner(rs, b, vocab, p, cfg);
  EXPECT_TRUE(stats.curve.empty());
  EXPECT_EQ(p.w_int, before.w_int);
  EXPECT_EQ(p.wq, before.wq);
}

TEST(Train, LossFallsByEpochFifty) {
  const auto& rs = records();
  std::vector<QARecord> train(rs.begin(), rs.begin() + 200);
  auto vocab = AnswerVocab::build(train);
  InputBuilder b(reasoner_features(16), SourceMode::GT, SourceMode::GT);
  double first = 0, fiftieth = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ReasonerConfig cfg;
    cfg.dim = 16;
    cfg.layers = 4;
    cfg.epochs = 50;
    cfg.batch = 32;
    cfg.lr = 1e-3;
    cfg.init = ReasonerInit::Random;
    cfg.seed = seed;
    auto p = init_reasoner(cfg, vocab, reasoner_features(16));
    auto stats = train_reasoner(train, b, vocab, p, cfg);
    ASSERT_EQ(stats.curve.size(), 50u);
    first += stats.curve.front() / 3;
    fiftieth += stats.curve.back() / 3;
  }
  EXPECT_LT(fiftieth, first);
}

TEST(Train, ValidationKeepsBestEpochAndIsDeterministic) {
  const auto& rs = records();
  auto split = split_dataset(rs, {0.6, 0.2, 0.2}, 0);
  auto vocab = AnswerVocab::build(split.train);
  InputBuilder b(reasoner_features(32), SourceMode::GT, SourceMode::GT);
  ReasonerConfig cfg;
  cfg.dim = 32;
  cfg.epochs = 5;
  cfg.batch = 64;
  cfg.lr = 1e-3;
  auto p1 = init_reasoner(cfg, vocab, reasoner_features(32));
  auto p2 = p1;
  auto s1 = train_reasoner(split.train, b, vocab, p1, cfg, {}, &split.val);
  auto s2 = train_reasoner(split.train, b, vocab, p2, cfg, {}, &split.val);
  EXPECT_EQ(s1.curve, s2.curve);
  ASSERT_EQ(s1.val_accuracy.size(), 5u);
  double kept = reasoner_accuracy(split.val, b, p1, vocab);
  for (double a : s1.val_accuracy) EXPECT_GE(kept, a);
  EXPECT_EQ(p1.w_cls, p2.w_cls);
}

TEST(Train, OutOfVocabularyAnswers) {
  const auto& rs = records();
  std::vector<QARecord> train(rs.begin(), rs.begin() + 20);
  auto vocab = AnswerVocab::build({train[0]});
  InputBuilder b(reasoner_features(8), SourceMode::GT, SourceMode::GT);
  ReasonerConfig cfg;
  cfg.dim = 8;
  cfg.epochs = 1;
  auto p = init_reasoner(cfg, vocab, reasoner_features(8));
  auto stats = train_reasoner(train, b, vocab, p, cfg);
  std::size_t outside = 0;
  for (const auto& r : train) outside += r.answer != train[0].answer;
  EXPECT_EQ(stats.skipped_records, outside);

  // A test answer missing from the vocabulary can never be predicted.
  QARecord unseen = train[0];
  unseen.answer = "no such answer";
  EXPECT_DOUBLE_EQ(reasoner_accuracy({unseen}, b, p, vocab), 0.0);
  EXPECT_DOUBLE_EQ(reasoner_accuracy({train[0]}, b, p, vocab), 1.0);
}
