#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "kbvqa/knowledge_store.hpp"
#include "oracles.hpp"

using namespace kbvqa;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& body) {
  fs::path dir = fs::temp_directory_path() / "kbvqa_ks_test";
  fs::create_directories(dir);
  fs::path p = dir / name;
  std::ofstream(p) << body;
  return p;
}

std::string line(const char* h, const char* r, const char* t) {
  return std::string("{\"head\":\"") + h + "\",\"relation\":\"" + r + "\",\"tail\":\"" + t + "\"}\n";
}

EntityId id_of(const KnowledgeGraph& g, const std::string& s) { return *g.symbols().find_entity(s); }

}  // namespace

TEST(LoadGraph, ThreeDistinctLines) {
  auto p = temp_file("three.jsonl", line("cat", "on", "mat") + line("mat", "madeOf", "straw") + line("dog", "near", "cat"));
  auto g = KnowledgeGraph::load_jsonl(p, Source::KB);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g.duplicate_count(), 0u);
  EXPECT_EQ(*g.find({"cat", "on", "mat"}), 0u);
  EXPECT_EQ(*g.find({"mat", "madeOf", "straw"}), 1u);
  EXPECT_EQ(*g.find({"dog", "near", "cat"}), 2u);
}

TEST(LoadGraph, EmptyFile) {
  auto g = KnowledgeGraph::load_jsonl(temp_file("empty.jsonl", ""), Source::KB);
  EXPECT_TRUE(g.empty());
  EXPECT_FALSE(g.find({"cat", "on", "mat"}).has_value());
  EXPECT_TRUE(g.match_keywords("cat").empty());
  EXPECT_TRUE(g.extract_subgraph({}, 2).empty());
}

TEST(LoadGraph, DuplicateCounted) {
  auto p = temp_file("dup.jsonl", line("a", "r", "b") + line("b", "r", "c") + line("a", "r", "b") + line("c", "r", "d"));
  auto g = KnowledgeGraph::load_jsonl(p, Source::KB);
  EXPECT_EQ(g.size(), 3u);
  EXPECT_EQ(g.duplicate_count(), 1u);
}

TEST(LoadGraph, MalformedLineReportsLine) {
  auto p = temp_file("bad.jsonl", line("a", "r", "b") + "{\"head\":\"x\"}\n");
  try {
    KnowledgeGraph::load_jsonl(p, Source::KB);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(KnowledgeGraph::load_jsonl(temp_file("junk.jsonl", "not json\n"), Source::KB), ParseError);
  EXPECT_THROW(KnowledgeGraph::load_jsonl("/nonexistent/kb.jsonl", Source::KB), std::runtime_error);
}

TEST(LoadGraph, TwiceIsStructurallyIdentical) {
  Rng rng(9);
  auto rg = oracle::random_graph(rng);
  auto src = KnowledgeGraph::from_triplets(rg.triplets, Source::KB);
  auto p = temp_file("twice.jsonl", "");
  src.save_jsonl(p);
  auto a = KnowledgeGraph::load_jsonl(p, Source::KB);
  auto b = KnowledgeGraph::load_jsonl(p, Source::KB);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.triplets(), b.triplets());
  ASSERT_EQ(a.symbols().entity_count(), b.symbols().entity_count());
  for (EntityId e = 0; e < a.symbols().entity_count(); ++e) {
    EXPECT_EQ(a.symbols().entity(e), b.symbols().entity(e));
    EXPECT_EQ(a.incident(e), b.incident(e));
  }
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.verbalize(i), b.verbalize(i));
}

TEST(Verbalize, Examples) {
  EXPECT_EQ(verbalize({"cat", "on", "mat"}), "cat on mat");
  EXPECT_EQ(verbalize({"fire_truck", "has_color", "red"}), "fire truck has color red");
}

TEST(Verbalize, InjectiveOnSingleTokenSymbols) {
  std::set<std::string> seen;
  const char* names[] = {"a", "b", "c"};
  for (auto h : names)
    for (auto r : names)
      for (auto t : names) EXPECT_TRUE(seen.insert(verbalize({h, r, t})).second);
}

TEST(MatchKeywords, Examples) {
  auto g = KnowledgeGraph::from_triplets(
      {{"cat", "on", "mat"}, {"fire truck", "has color", "red"}, {"truck", "near", "road"}}, Source::KB);
  EXPECT_EQ(g.match_keywords("What is the cat on?"), std::vector<EntityId>{id_of(g, "cat")});
  EXPECT_TRUE(g.match_keywords("xyzzy?").empty());
  auto hits = g.match_keywords("red fire truck");
  std::set<EntityId> s(hits.begin(), hits.end());
  EXPECT_TRUE(s.count(id_of(g, "fire truck")));
  EXPECT_TRUE(s.count(id_of(g, "truck")));
}

TEST(Subgraph, ChainTwoHops) {
  auto g = KnowledgeGraph::from_triplets({{"a", "r1", "b"}, {"b", "r2", "c"}}, Source::KB);
  EXPECT_EQ(g.extract_subgraph({id_of(g, "a")}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(g.extract_subgraph({id_of(g, "a")}, 1), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(g.extract_subgraph({id_of(g, "a")}, 0).empty());
}

TEST(Subgraph, NoSeeds) {
  auto g = KnowledgeGraph::from_triplets({{"a", "r1", "b"}}, Source::KB);
  EXPECT_TRUE(g.extract_subgraph({}, 3).empty());
}

TEST(Subgraph, Star) {
  std::vector<TripletText> ts;
  for (int i = 0; i < 5; ++i) ts.push_back({"x", "r", "s" + std::to_string(i)});
  ts.push_back({"s0", "r", "far"});
  auto g = KnowledgeGraph::from_triplets(ts, Source::KB);
  EXPECT_EQ(g.extract_subgraph({id_of(g, "x")}, 1), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Subgraph, BadArguments) {
  auto g = KnowledgeGraph::from_triplets({{"a", "r1", "b"}}, Source::KB);
  EXPECT_THROW(g.extract_subgraph({0}, -1), PreconditionError);
  EXPECT_THROW(g.extract_subgraph({99}, 1), PreconditionError);
}

TEST(Subgraph, MatchesBfsOracleAndIsMonotone) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    auto rg = oracle::random_graph(rng);
    auto g = KnowledgeGraph::from_triplets(rg.triplets, Source::KB);
    for (EntityId seed = 0; seed < g.symbols().entity_count(); ++seed) {
      std::vector<std::size_t> prev;
      for (int h = 0; h <= 3; ++h) {
        auto got = g.extract_subgraph({seed}, h);
        ASSERT_EQ(got, oracle::bfs_subgraph(g, seed, h)) << "trial " << trial << " seed " << seed << " hops " << h;
        EXPECT_TRUE(std::includes(got.begin(), got.end(), prev.begin(), prev.end()));
        prev = got;
      }
    }
  }
}

TEST(SceneGraphs, RoundTrip) {
  std::vector<SceneGraph> sgs = {{"img0", {{"cat", "on", "mat"}}}, {"img1", {{"dog", "near", "tree"}, {"tree", "has", "leaf"}}}};
  auto p = temp_file("scenes.jsonl", "");
  save_scene_graphs(p, sgs);
  EXPECT_EQ(load_scene_graphs(p), sgs);
}

TEST(SymbolTable, EmptySurfaceRejected) {
  SymbolTable s;
  EXPECT_THROW(s.intern_entity("  "), PreconditionError);
  EXPECT_THROW(s.entity(0), LookupError);
  EXPECT_EQ(s.intern_entity("Cat"), s.intern_entity("cat "));
}
