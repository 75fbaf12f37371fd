#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "kbvqa/dataset.hpp"
#include "kbvqa/llm_pipeline.hpp"

using namespace kbvqa;

namespace {

QARecord rec(const std::string& id, const std::string& q, const std::string& caption, const std::string& answer,
             std::vector<TripletText> sg, std::vector<TripletText> kb = {}) {
  QARecord r;
  r.id = id;
  r.image_id = "img_" + id;
  r.question = q;
  r.caption = caption;
  r.answer = answer;
  r.reason_sg = std::move(sg);
  r.reason_kb = std::move(kb);
  r.kb_related = !r.reason_kb.empty();
  r.hops = r.reason_sg.size() + r.reason_kb.size() == 2 ? 2 : 1;
  r.qtype = r.hops == 2 ? 5 : 1;
  return r;
}

std::size_t count_lines_starting(const std::string& s, const std::string& prefix) {
  std::size_t n = 0, pos = 0;
  while (pos < s.size()) {
    std::size_t end = s.find('\n', pos);
    if (end == std::string::npos) end = s.size();
    if (s.compare(pos, prefix.size(), prefix) == 0) ++n;
    pos = end + 1;
  }
  return n;
}

// Serves /v1/completions from a script of (status, text) pairs.
class StubServer {
 public:
  explicit StubServer(std::vector<std::pair<int, std::string>> script) : script_(std::move(script)) {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::size_t i = hits_++;
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = req.body;
      auto [status, text] = script_[std::min(i, script_.size() - 1)];
      res.status = status;
      nlohmann::json body = {{"choices", {{{"text", text}}}}};
      res.set_content(status == 200 ? body.dump() : std::string("{\"error\":\"scripted\"}"), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  LlmEndpoint endpoint() const {
    LlmEndpoint e;
    e.base_url = "http://127.0.0.1:" + std::to_string(port_);
    e.auth_env = "KBVQA_TEST_KEY";
    e.backoff = std::chrono::milliseconds(1);
    e.timeout = std::chrono::milliseconds(5000);
    return e;
  }
  std::size_t hits() const { return hits_; }
  std::string last_auth() const { return last_auth_; }
  std::string last_body() const { return last_body_; }

 private:
  std::vector<std::pair<int, std::string>> script_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> hits_{0};
  std::string last_auth_, last_body_;
};

struct KeyGuard {
  KeyGuard() { setenv("KBVQA_TEST_KEY", "sk-test", 1); }
  ~KeyGuard() { unsetenv("KBVQA_TEST_KEY"); }
};

}  // namespace

TEST(Shots, SelfIsMostSimilarAndLast) {
  std::vector<QARecord> train = {
      rec("a", "What is cat on?", "cat on mat", "mat", {{"cat", "on", "mat"}}),
      rec("b", "What is dog near?", "dog near tree", "tree", {{"dog", "near", "tree"}}),
      rec("c", "What color is truck?", "truck on road", "red", {{"truck", "has color", "red"}}),
  };
  BaseEmbedder e(128, 0);
  auto shots = select_shots(train[1], train, e, 3);
  ASSERT_EQ(shots.size(), 3u);
  EXPECT_EQ(shots.back().id, "b");
  EXPECT_EQ(select_shots(train[1], train, e, 3), shots);
}

TEST(Shots, SingleShotMatchesBruteForce) {
  std::vector<QARecord> train = {
      rec("a", "What is cat on?", "cat on mat", "mat", {{"cat", "on", "mat"}}),
      rec("b", "What is dog near?", "dog near tree", "tree", {{"dog", "near", "tree"}}),
      rec("c", "What is the truck on?", "truck on road", "road", {{"truck", "on", "road"}}),
  };
  QARecord probe = rec("p", "What is the cat near?", "cat near truck", "truck", {{"cat", "near", "truck"}});
  BaseEmbedder e(128, 0);
  std::size_t best = 0;
  double best_cos = -2;
  for (std::size_t i = 0; i < train.size(); ++i) {
    double c = cosine_similarity(e.embed(train[i].question + " " + train[i].caption),
                                 e.embed(probe.question + " " + probe.caption));
    if (c > best_cos) best_cos = c, best = i;
  }
  auto shots = select_shots(probe, train, e, 1);
  ASSERT_EQ(shots.size(), 1u);
  EXPECT_EQ(shots[0].id, train[best].id);
}

TEST(Shots, ShuffledTrainingGivesSameSet) {
  WorldSpec s;
  s.n_images = 20;
  auto rs = generate_questions(generate_world(s), 6);
  std::vector<QARecord> train(rs.begin() + 1, rs.end());
  BaseEmbedder e(128, 0);
  auto a = select_shots(rs[0], train, e, 8);
  Rng rng(3);
  rng.shuffle(train);
  auto b = select_shots(rs[0], train, e, 8);
  EXPECT_EQ(a, b);
}

TEST(Shots, BadCounts) {
  std::vector<QARecord> train = {rec("a", "What is cat on?", "cat on mat", "mat", {{"cat", "on", "mat"}})};
  BaseEmbedder e(32, 0);
  EXPECT_THROW(select_shots(train[0], train, e, 0), std::invalid_argument);
  EXPECT_EQ(select_shots(train[0], train, e, 5).size(), 1u);
  EXPECT_THROW(ShotSelector({}, e), EmptyInputError);
}

TEST(Render, ExactBytes) {
  Shot s1{"cat on mat", {"cat on mat", "mat made of straw"}, "What cat on made of?", "straw"};
  Shot t{"dog near tree", {}, "What is dog near?", ""};
  auto p = render_prompt({s1}, t);
  EXPECT_EQ(p.rendered,
            "Please answer the question according to the context and knowledge.\n\n"
            "Knowledge: cat on mat; mat made of straw\nContext: cat on mat\nQuestion: What cat on made of?\nAnswer: straw\n\n"
            "Knowledge: none\nContext: dog near tree\nQuestion: What is dog near?\nAnswer:");
  EXPECT_EQ(render_prompt({s1}, t).rendered, p.rendered);
}

TEST(Render, NoneModeAndQuestionCount) {
  std::vector<QARecord> rs = {
      rec("a", "What is cat on?", "cat on mat", "mat", {{"cat", "on", "mat"}}),
      rec("b", "What is dog near?", "dog near tree", "tree", {{"dog", "near", "tree"}}),
      rec("c", "What is truck on?", "truck on road", "road", {{"truck", "on", "road"}}),
  };
  InputBuilder none(reasoner_features(16), SourceMode::None, SourceMode::None);
  auto p = render_prompt({rs[0], rs[1]}, rs[2], none);
  EXPECT_EQ(count_lines_starting(p.rendered, "Question:"), 3u);
  EXPECT_EQ(count_lines_starting(p.rendered, "Knowledge:"), 3u);
  EXPECT_EQ(count_lines_starting(p.rendered, "Knowledge: none"), 3u);
  EXPECT_EQ(count_lines_starting(p.rendered, "Answer: "), 2u);
}

TEST(Render, GtModeTypeFiveShowsChain) {
  QARecord r = rec("t5", "What cat on madeOf?", "cat on mat", "straw", {{"cat", "on", "mat"}}, {{"mat", "madeOf", "straw"}});
  InputBuilder gt(reasoner_features(16), SourceMode::GT, SourceMode::GT);
  auto p = render_prompt({}, r, gt);
  EXPECT_NE(p.rendered.find("cat on mat"), std::string::npos);
  EXPECT_NE(p.rendered.find("mat madeOf straw"), std::string::npos);
  auto parsed = parse_test_block(p.rendered);
  EXPECT_EQ(parsed.knowledge, (std::vector<std::string>{"mat madeOf straw", "cat on mat"}));
}

TEST(Mock, GtNoneAndParseErrors) {
  QARecord r = rec("t5", "What cat on madeOf?", "cat on mat", "straw", {{"cat", "on", "mat"}}, {{"mat", "madeOf", "straw"}});
  InputBuilder b(reasoner_features(16), SourceMode::GT, SourceMode::GT);
  EXPECT_EQ(mock_llm(render_prompt({}, r, b).rendered, answer_key(r)), "straw\n");
  b.set_modes(SourceMode::None, SourceMode::None);
  EXPECT_EQ(mock_llm(render_prompt({}, r, b).rendered, answer_key(r)), "unknown\n");
  b.set_modes(SourceMode::None, SourceMode::GT);
  EXPECT_EQ(mock_llm(render_prompt({}, r, b).rendered, answer_key(r)), "unknown\n");

  EXPECT_THROW(mock_llm("Answer the question.\n\nKnowledge: none", answer_key(r)), MockProtocolError);
  std::string ok = render_prompt({}, r, b).rendered;
  EXPECT_THROW(mock_llm(ok + " straw", answer_key(r)), MockProtocolError);
  EXPECT_THROW(mock_llm(ok + "\n", answer_key(r)), MockProtocolError);
}

TEST(Mock, RetrievalHitAndMiss) {
  QARecord r = rec("q", "What is cat on?", "cat on mat", "mat", {{"cat", "on", "mat"}});
  SceneGraph sg{r.image_id, {{"cat", "on", "mat"}, {"dog", "near", "tree"}, {"cup", "on", "desk"}}};
  auto corpus = TripletCorpus::from_scenes({sg});
  auto enc = DualEncoder::baseline(BaseEmbedder(32, 0));
  Matrix q = enc.encode_questions({r.question});
  Matrix hit(3, 32), miss(3, 32);
  for (std::size_t c = 0; c < 32; ++c) {
    hit(0, c) = q(0, c);
    miss(0, c) = -q(0, c);
    hit(1, c) = miss(1, c) = c == 0 ? 1.0 : 0.0;
    hit(2, c) = miss(2, c) = c == 1 ? 1.0 : 0.0;
  }
  RetrievalIndex hit_index(Source::SG, hit), miss_index(Source::SG, miss);
  for (auto [index, want] : {std::pair{&hit_index, "mat\n"}, std::pair{&miss_index, "unknown\n"}}) {
    InputBuilder b(reasoner_features(16), SourceMode::None, SourceMode::Ret, 1);
    b.attach(Source::SG, {&corpus, &enc, index});
    EXPECT_EQ(mock_llm(render_prompt({}, r, b).rendered, answer_key(r)), want);
  }
}

TEST(ParseAnswer, Rules) {
  EXPECT_EQ(parse_answer("Mat.\n"), "mat");
  EXPECT_EQ(parse_answer("mat\nbecause..."), "mat");
  EXPECT_EQ(parse_answer(""), "");
  EXPECT_EQ(parse_answer("  Fire Truck!  "), "fire truck");
}

TEST(Client, EchoesCompletion) {
  KeyGuard key;
  StubServer stub({{200, "mat\n"}});
  auto r = llm_complete_detailed("prompt text", stub.endpoint());
  EXPECT_EQ(r.text, "mat\n");
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(stub.last_auth(), "Bearer sk-test");
  auto body = nlohmann::json::parse(stub.last_body());
  EXPECT_EQ(body["prompt"], "prompt text");
  EXPECT_EQ(body["model"], "davinci-002");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 10);
}

TEST(Client, RetriesServerErrors) {
  KeyGuard key;
  StubServer stub({{500, ""}, {500, ""}, {200, "straw"}});
  auto e = stub.endpoint();
  e.transcript = std::filesystem::temp_directory_path() / "kbvqa_transcript.jsonl";
  std::filesystem::remove(*e.transcript);
  auto r = llm_complete_detailed("p", e);
  EXPECT_EQ(r.text, "straw");
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(stub.hits(), 3u);
  std::ifstream in(*e.transcript);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 3);
}

TEST(Client, GivesUpAfterAttempts) {
  KeyGuard key;
  StubServer stub({{503, ""}});
  try {
    llm_complete("p", stub.endpoint());
    FAIL() << "expected ApiError";
  } catch (const ApiError& e) {
    EXPECT_EQ(e.status(), 503);
  }
  EXPECT_EQ(stub.hits(), 3u);
}

TEST(Client, ClientErrorsAreNotRetried) {
  KeyGuard key;
  StubServer bad({{400, ""}});
  EXPECT_THROW(llm_complete("p", bad.endpoint()), ApiError);
  EXPECT_EQ(bad.hits(), 1u);
  StubServer denied({{401, ""}});
  EXPECT_THROW(llm_complete("p", denied.endpoint()), CredentialError);
  EXPECT_EQ(denied.hits(), 1u);
}

TEST(Client, MissingKeyFailsBeforeNetwork) {
  unsetenv("KBVQA_TEST_KEY");
  StubServer stub({{200, "mat"}});
  EXPECT_THROW(llm_complete("p", stub.endpoint()), CredentialError);
  EXPECT_EQ(stub.hits(), 0u);
}

TEST(Client, UnreachableServer) {
  KeyGuard key;
  LlmEndpoint e;
  e.base_url = "http://127.0.0.1:1";
  e.auth_env = "KBVQA_TEST_KEY";
  e.attempts = 2;
  e.backoff = std::chrono::milliseconds(1);
  e.timeout = std::chrono::milliseconds(500);
  EXPECT_THROW(llm_complete("p", e), TransportError);
}
