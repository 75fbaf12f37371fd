#include "kbvqa/llm_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "kbvqa/text.hpp"

namespace kbvqa {

using nlohmann::json;

namespace {
std::string selection_text(const QARecord& r) { return r.question + " " + r.caption; }
}  // namespace

ShotSelector::ShotSelector(const std::vector<QARecord>& train, const BaseEmbedder& embedder)
    : train_(&train), embedder_(embedder) {
  if (train.empty()) throw EmptyInputError("shot selection needs training records");
  embeddings_ = Matrix(train.size(), embedder.dim());
  for (std::size_t i = 0; i < train.size(); ++i) {
    Vector v = embedder_.embed(selection_text(train[i]));
    double n = norm(v);
    if (n > 0)
      for (double& x : v) x /= n;
    std::copy(v.begin(), v.end(), embeddings_.row(i).begin());
  }
}

std::vector<std::size_t> ShotSelector::select(const QARecord& record, std::size_t n) const {
  if (n == 0) throw std::invalid_argument("n_shots must be at least 1");
  const auto& train = *train_;
  if (n > train.size()) {
    std::cerr << "warning: requested " << n << " shots but only " << train.size() << " training records\n";
    n = train.size();
  }
  Vector q = embedder_.embed(selection_text(record));
  double qn = norm(q);
  std::vector<double> sim(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) sim[i] = qn > 0 ? dot(embeddings_.row(i), q) / qn : 0.0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return train[a].id < train[b].id;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), better);
  order.resize(n);
  std::reverse(order.begin(), order.end());
  return order;
}

std::vector<QARecord> select_shots(const QARecord& record, const std::vector<QARecord>& train,
                                   const BaseEmbedder& embedder, std::size_t n) {
  ShotSelector selector(train, embedder);
  std::vector<QARecord> out;
  for (auto i : selector.select(record, n)) out.push_back(train[i]);
  return out;
}

Shot make_shot(const QARecord& r, const InputBuilder& knowledge, bool with_answer) {
  Shot s;
  s.caption = r.caption;
  s.question = r.question;
  if (with_answer) s.answer = r.answer;
  for (Source src : {Source::KB, Source::SG})
    for (auto& t : knowledge.knowledge(r, src)) s.knowledge.push_back(std::move(t));
  return s;
}

namespace {
void render_block(std::string& out, const Shot& s) {
  out += "Knowledge: ";
  out += s.knowledge.empty() ? std::string("none") : join(s.knowledge, "; ");
  out += "\nContext: " + s.caption;
  out += "\nQuestion: " + s.question;
  out += "\nAnswer:";
}
}  // namespace

Prompt render_prompt(const std::vector<Shot>& shots, const Shot& test) {
  Prompt p;
  p.shots = shots;
  p.test = test;
  p.test.answer.clear();
  p.rendered = p.header + "\n\n";
  for (const auto& s : shots) {
    render_block(p.rendered, s);
    p.rendered += " " + s.answer + "\n\n";
  }
  render_block(p.rendered, p.test);
  return p;
}

Prompt render_prompt(const std::vector<QARecord>& shots, const QARecord& test, const InputBuilder& knowledge) {
  std::vector<Shot> blocks;
  for (const auto& r : shots) blocks.push_back(make_shot(r, knowledge, true));
  return render_prompt(blocks, make_shot(test, knowledge, false));
}

namespace {

void log_transcript(const LlmEndpoint& e, const json& entry) {
  if (!e.transcript) return;
  std::ofstream out(*e.transcript, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to transcript " + e.transcript->string());
  out << entry.dump() << '\n';
}

bool retryable(int status) { return status == 429 || status >= 500; }

}  // namespace

CompletionResult llm_complete_detailed(const std::string& prompt, const LlmEndpoint& endpoint) {
  const char* token = std::getenv(endpoint.auth_env.c_str());
  if (!token || !*token) throw CredentialError("environment variable " + endpoint.auth_env + " is not set");
  if (endpoint.attempts < 1) throw std::invalid_argument("endpoint attempts must be at least 1");

  json request = {{"model", endpoint.model},
                  {"prompt", prompt},
                  {"max_tokens", endpoint.max_tokens},
                  {"temperature", endpoint.temperature},
                  {"stop", endpoint.stop}};
  const std::string body = request.dump();
  httplib::Client client(endpoint.base_url);
  if (!client.is_valid()) throw TransportError("cannot use endpoint URL " + endpoint.base_url);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
  auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers = {{"Authorization", std::string("Bearer ") + token}};

  auto backoff = endpoint.backoff;
  std::string last_error;
  int last_status = 0;
  std::string last_body;
  for (int attempt = 1; attempt <= endpoint.attempts; ++attempt) {
    if (attempt > 1) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto res = client.Post(endpoint.path, headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      log_transcript(endpoint, {{"attempt", attempt}, {"request", request}, {"error", last_error}});
      continue;
    }
    log_transcript(endpoint, {{"attempt", attempt}, {"request", request}, {"status", res->status}, {"response", res->body}});
    if (res->status == 401 || res->status == 403)
      throw CredentialError("completion API rejected the credentials (" + std::to_string(res->status) + ")");
    if (res->status >= 200 && res->status < 300) {
      try {
        auto j = json::parse(res->body);
        return {j.at("choices").at(0).at("text").get<std::string>(), attempt};
      } catch (const json::exception&) {
        throw ApiError(res->status, "unexpected response body: " + res->body);
      }
    }
    if (!retryable(res->status)) throw ApiError(res->status, res->body);
    last_status = res->status;
    last_body = res->body;
    last_error.clear();
  }
  if (last_error.empty()) throw ApiError(last_status, last_body);
  throw TransportError("completion request failed after " + std::to_string(endpoint.attempts) +
                       " attempts: " + last_error);
}

std::string llm_complete(const std::string& prompt, const LlmEndpoint& endpoint) {
  return llm_complete_detailed(prompt, endpoint).text;
}

AnswerKey answer_key(const QARecord& r) {
  AnswerKey k;
  k.answer = r.answer;
  for (const auto* set : {&r.reason_kb, &r.reason_sg})
    for (const auto& t : *set) k.reasons.push_back(verbalize(t));
  return k;
}

namespace {

std::vector<std::string> split_on(const std::string& s, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + sep.size();
  }
}

std::string field(const std::string& line, const std::string& prefix, std::size_t block) {
  if (line.rfind(prefix, 0) != 0)
    throw MockProtocolError("block " + std::to_string(block) + ": expected line starting with '" + prefix + "'");
  return line.substr(prefix.size());
}

}  // namespace

ParsedBlock parse_test_block(const std::string& prompt) {
  const std::string head = std::string(kPromptHeader) + "\n\n";
  if (prompt.rfind(head, 0) != 0) throw MockProtocolError("prompt does not start with the instruction header");
  auto blocks = split_on(prompt.substr(head.size()), "\n\n");
  if (!blocks.back().empty() && blocks.back().back() == '\n') throw MockProtocolError("trailing newline after test block");
  ParsedBlock out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto lines = split_on(blocks[b], "\n");
    if (lines.size() != 4) throw MockProtocolError("block " + std::to_string(b) + " does not have four lines");
    std::string knowledge = field(lines[0], "Knowledge: ", b);
    std::string context = field(lines[1], "Context: ", b);
    std::string question = field(lines[2], "Question: ", b);
    bool last = b + 1 == blocks.size();
    if (last) {
      if (lines[3] != "Answer:") throw MockProtocolError("test block must end with 'Answer:'");
      out.context = context;
      out.question = question;
      if (knowledge != "none") out.knowledge = split_on(knowledge, "; ");
    } else {
      field(lines[3], "Answer: ", b);
    }
  }
  return out;
}

std::string mock_llm(const std::string& prompt, const AnswerKey& key) {
  ParsedBlock test = parse_test_block(prompt);
  for (const auto& r : key.reasons)
    if (std::find(test.knowledge.begin(), test.knowledge.end(), r) == test.knowledge.end()) return "unknown\n";
  return key.answer + "\n";
}

std::string parse_answer(const std::string& completion) {
  std::string line = completion.substr(0, completion.find('\n'));
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto is_punct = [](unsigned char c) { return std::ispunct(c) != 0; };
  while (!line.empty() && is_space(static_cast<unsigned char>(line.front()))) line.erase(line.begin());
  while (!line.empty() && (is_space(static_cast<unsigned char>(line.back())) ||
                           is_punct(static_cast<unsigned char>(line.back()))))
    line.pop_back();
  for (char& c : line) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return line;
}

}  // namespace kbvqa
