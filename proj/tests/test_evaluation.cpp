#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kbvqa/evaluation.hpp"
#include "kbvqa/llm_pipeline.hpp"

using namespace kbvqa;
namespace fs = std::filesystem;

namespace {

QARecord rec(const std::string& id, int qtype, bool kb, const std::string& answer) {
  QARecord r;
  r.id = id;
  r.qtype = qtype;
  r.hops = qtype <= 2 ? 1 : 2;
  r.kb_related = kb;
  r.answer = answer;
  return r;
}

std::vector<QARecord> six() {
  return {rec("r1", 1, false, "mat"), rec("r2", 1, true, "straw"), rec("r3", 1, false, "red"),
          rec("r4", 5, true, "tree"), rec("r5", 5, false, "cup"),  rec("r6", 5, true, "desk")};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "kbvqa_eval_test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<QARecord> all_qtypes() {
  std::vector<QARecord> rs;
  for (int i = 0; i < 21; ++i) rs.push_back(rec("x" + std::to_string(i), i % 7, i % 3 == 0, "a" + std::to_string(i % 4)));
  return rs;
}

}  // namespace

TEST(Score, AllRightAllWrong) {
  auto rs = six();
  std::vector<Prediction> right, wrong;
  for (const auto& r : rs) {
    right.push_back({r.id, r.answer});
    wrong.push_back({r.id, "nope"});
  }
  auto a = score(right, rs), b = score(wrong, rs);
  for (const auto* rep : {&a, &b}) {
    double want = rep == &a ? 1.0 : 0.0;
    EXPECT_EQ(rep->overall.accuracy(), want);
    for (const auto& c : rep->qtype)
      if (c.n) EXPECT_EQ(c.accuracy(), want);
    for (const auto& c : rep->hop) EXPECT_EQ(c.accuracy(), want);
    for (const auto& c : rep->kb) EXPECT_EQ(c.accuracy(), want);
  }
}

TEST(Score, HandTally) {
  // right: r1, r2 (after normalization), r4; wrong: r3, r5, r6
  std::vector<Prediction> p = {{"r1", "mat"},  {"r2", " Straw."}, {"r3", "blue"},
                               {"r4", "TREE"}, {"r5", "mug"},     {"r6", ""}};
  auto rep = score(p, six());
  EXPECT_EQ(rep.overall.correct, 3u);
  EXPECT_EQ(rep.overall.n, 6u);
  EXPECT_EQ(rep.qtype[1].correct, 2u);
  EXPECT_EQ(rep.qtype[1].n, 3u);
  EXPECT_EQ(rep.qtype[5].correct, 1u);
  EXPECT_EQ(rep.qtype[5].n, 3u);
  EXPECT_EQ(rep.qtype[0].n, 0u);
  EXPECT_EQ(rep.hop[0].correct, 2u);
  EXPECT_EQ(rep.hop[1].correct, 1u);
  EXPECT_EQ(rep.kb[0].correct, 2u);  // r2, r4 of r2, r4, r6
  EXPECT_EQ(rep.kb[0].n, 3u);
  EXPECT_EQ(rep.kb[1].correct, 1u);  // r1 of r1, r3, r5
  EXPECT_DOUBLE_EQ(rep.overall.accuracy(), 0.5);
}

TEST(Score, OverallIsWeightedMeanAndRepeatable) {
  auto rs = all_qtypes();
  std::vector<Prediction> p;
  for (std::size_t i = 0; i < rs.size(); ++i) p.push_back({rs[i].id, i % 2 ? rs[i].answer : "x"});
  auto a = score(p, rs), b = score(p, rs);
  double weighted = 0;
  for (const auto& c : a.qtype) weighted += c.accuracy() * static_cast<double>(c.n);
  EXPECT_NEAR(weighted / static_cast<double>(a.overall.n), a.overall.accuracy(), 1e-12);
  EXPECT_EQ(a.overall.correct, b.overall.correct);
  for (std::size_t t = 0; t < 7; ++t) EXPECT_EQ(a.qtype[t].correct, b.qtype[t].correct);
}

TEST(Score, AlignmentErrors) {
  auto rs = six();
  std::vector<Prediction> p;
  for (const auto& r : rs) p.push_back({r.id, r.answer});
  auto dup = p;
  dup.back().id = "r1";
  EXPECT_THROW(score(dup, rs), AlignmentError);
  auto missing = p;
  missing.pop_back();
  EXPECT_THROW(score(missing, rs), AlignmentError);
  auto renamed = p;
  renamed.back().id = "r7";
  EXPECT_THROW(score(renamed, rs), AlignmentError);
}

TEST(Normalize, Answers) {
  EXPECT_EQ(normalize_answer("  Mat. "), "mat");
  EXPECT_EQ(normalize_answer("fire truck!"), "fire truck");
  EXPECT_EQ(normalize_answer(""), "");
}

TEST(Emit, CsvRoundTrip) {
  auto rs = all_qtypes();
  std::vector<Prediction> p;
  for (std::size_t i = 0; i < rs.size(); ++i) p.push_back({rs[i].id, i % 3 ? rs[i].answer : "x"});
  auto rep = score(p, rs);
  auto path = temp_path("qtype.csv");
  emit_qtype(rep, path, ReportFormat::Csv);
  auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"qtype", "accuracy", "n"}));
  for (std::size_t t = 0; t < 7; ++t) {
    EXPECT_EQ(std::stoul(rows[t + 1][0]), t);
    EXPECT_NEAR(std::stod(rows[t + 1][1]), rep.qtype[t].accuracy(), 5e-7);
    EXPECT_EQ(std::stoul(rows[t + 1][2]), rep.qtype[t].n);
  }
  emit_split(rep, path, ReportFormat::Csv);
  rows = read_csv(path);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[1][0], "1hop");
  EXPECT_NEAR(std::stod(rows[1][1]), rep.hop[0].accuracy(), 5e-7);
  EXPECT_EQ(rows[4][0], "nokb");
}

TEST(Emit, EmptyReportIsHeaderOnly) {
  auto path = temp_path("empty.csv");
  emit_qtype(score({}, {}), path, ReportFormat::Csv);
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all, "qtype,accuracy,n\n");
}

TEST(Emit, MarkdownMirrorsCsv) {
  auto rs = all_qtypes();
  std::vector<Prediction> p;
  for (const auto& r : rs) p.push_back({r.id, r.answer});
  auto rep = score(p, rs);
  auto md = temp_path("qtype.md"), csv = temp_path("qtype2.csv");
  emit_qtype(rep, md, ReportFormat::Markdown);
  emit_qtype(rep, csv, ReportFormat::Csv);
  std::ifstream in(md);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 9u);
  EXPECT_EQ(lines[0], "| qtype | accuracy | n |");
  EXPECT_EQ(lines[1], "| --- | --- | --- |");
  auto rows = read_csv(csv);
  for (std::size_t i = 0; i < 7; ++i)
    EXPECT_EQ(lines[i + 2], "| " + rows[i + 1][0] + " | " + rows[i + 1][1] + " | " + rows[i + 1][2] + " |");
}

TEST(Ablation, AbsentCellsAreOmitted) {
  auto rs = six();
  auto grid = run_ablation(rs, Branch::Reasoner, [&](const AblationConfig& c) -> std::optional<std::vector<Prediction>> {
    if (c.kb == SourceMode::Ret) return std::nullopt;
    std::vector<Prediction> p;
    for (const auto& r : rs) p.push_back({r.id, c.label == "none" ? "x" : r.answer});
    return p;
  });
  ASSERT_EQ(grid.entries.size(), 7u);
  EXPECT_FALSE(grid.at("kb_ret").present);
  EXPECT_DOUBLE_EQ(grid.at("none").accuracy, 0.0);
  EXPECT_DOUBLE_EQ(grid.at("sg_gt").accuracy, 1.0);
  EXPECT_THROW(grid.at("bogus"), std::out_of_range);
  auto path = temp_path("grid.csv");
  emit_grid(grid, path, ReportFormat::Csv);
  auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 6u);  // header + 5 present
  EXPECT_EQ(rows[0], (std::vector<std::string>{"config", "branch", "accuracy", "n"}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"none", "reasoner", "0.000000", "6"}));
  EXPECT_EQ(parse_branch("llm-mock"), Branch::LlmMock);
  EXPECT_THROW(parse_branch("gpt"), std::invalid_argument);
}

TEST(Ablation, MockGridMatchesRecount) {
  WorldSpec spec;
  spec.n_images = 40;
  World w = generate_world(spec);
  auto rs = generate_questions(w, 8);
  auto kb = TripletCorpus::from_kb(w.kb, w.scenes, 2);
  auto sg = TripletCorpus::from_scenes(w.scenes);
  auto enc = DualEncoder::baseline(BaseEmbedder(64, 0));
  RetrievalIndex kb_index(kb, enc), sg_index(sg, enc);
  InputBuilder b(reasoner_features(16), SourceMode::None, SourceMode::None, 10);
  b.attach(Source::KB, {&kb, &enc, &kb_index});
  b.attach(Source::SG, {&sg, &enc, &sg_index});

  auto grid = run_ablation(rs, Branch::LlmMock, [&](const AblationConfig& c) {
    b.set_modes(c.kb, c.sg);
    std::vector<Prediction> p;
    for (const auto& r : rs) p.push_back({r.id, parse_answer(mock_llm(render_prompt({}, r, b).rendered, answer_key(r)))});
    return std::optional<std::vector<Prediction>>(p);
  });

  // Independent recount over row ids rather than rendered strings.
  double joint = 0, kb_only = 0, sg_only = 0, no_sg = 0, no_kb = 0;
  for (const auto& r : rs) {
    auto covered = [&](const TripletCorpus& corpus, const RetrievalIndex& index) {
      if (corpus.reasons(r).empty()) return true;
      auto pool = corpus.candidates(r);
      auto ids = retrieve_topk(r.question, index, enc, 10, &pool).ids();
      for (auto g : corpus.ground_truth(r))
        if (std::find(ids.begin(), ids.end(), g) == ids.end()) return false;
      return true;
    };
    bool k = covered(kb, kb_index), s = covered(sg, sg_index);
    joint += k && s;
    kb_only += k && r.reason_sg.empty();
    sg_only += s && r.reason_kb.empty();
    no_sg += r.reason_sg.empty();
    no_kb += r.reason_kb.empty();
  }
  const double n = static_cast<double>(rs.size());
  EXPECT_DOUBLE_EQ(grid.at("none").accuracy, 0.0);
  EXPECT_DOUBLE_EQ(grid.at("kb_gt+sg_gt").accuracy, 1.0);
  EXPECT_NEAR(grid.at("kb_ret+sg_ret").accuracy, joint / n, 1e-12);
  EXPECT_NEAR(grid.at("kb_ret").accuracy, kb_only / n, 1e-12);
  EXPECT_NEAR(grid.at("sg_ret").accuracy, sg_only / n, 1e-12);
  // One source alone answers only records whose whole chain lives in it.
  EXPECT_NEAR(grid.at("kb_gt").accuracy, no_sg / n, 1e-12);
  EXPECT_NEAR(grid.at("sg_gt").accuracy, no_kb / n, 1e-12);
}
