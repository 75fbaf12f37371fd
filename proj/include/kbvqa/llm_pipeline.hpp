#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbvqa/dataset.hpp"
#include "kbvqa/encoder.hpp"
#include "kbvqa/reasoner.hpp"

namespace kbvqa {

inline constexpr const char* kPromptHeader = "Please answer the question according to the context and knowledge.";

struct Shot {
  std::string caption;
  std::vector<std::string> knowledge;  // verbalized triplets, KB first then SG
  std::string question;
  std::string answer;  // empty for the test block
};

struct Prompt {
  std::string header = kPromptHeader;
  std::vector<Shot> shots;
  Shot test;
  std::string rendered;
};

// Embeds "question caption" for every training record once; selection is a
// cosine scan. Returned indices run from least to most similar so the best
// example sits right above the test block.
class ShotSelector {
 public:
  ShotSelector(const std::vector<QARecord>& train, const BaseEmbedder& embedder);

  std::vector<std::size_t> select(const QARecord& record, std::size_t n) const;

 private:
  const std::vector<QARecord>* train_;
  BaseEmbedder embedder_;
  Matrix embeddings_;
};

std::vector<QARecord> select_shots(const QARecord& record, const std::vector<QARecord>& train,
                                   const BaseEmbedder& embedder, std::size_t n);

// Knowledge comes from the builder's per-source modes.
Shot make_shot(const QARecord& r, const InputBuilder& knowledge, bool with_answer);

Prompt render_prompt(const std::vector<Shot>& shots, const Shot& test);
Prompt render_prompt(const std::vector<QARecord>& shots, const QARecord& test, const InputBuilder& knowledge);

struct LlmEndpoint {
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/v1/completions";
  std::string model = "davinci-002";
  std::string auth_env = "KBVQA_API_KEY";
  std::chrono::milliseconds timeout{30000};
  int max_tokens = 10;
  double temperature = 0.0;
  std::string stop = "\n\n";
  int attempts = 3;
  std::chrono::milliseconds backoff{200};  // doubled after each failed attempt
  std::optional<std::filesystem::path> transcript;
};

class CredentialError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string body)
      : std::runtime_error("completion API returned " + std::to_string(status) + ": " + body),
        status_(status),
        body_(std::move(body)) {}
  int status() const { return status_; }
  const std::string& body() const { return body_; }

 private:
  int status_;
  std::string body_;
};

class MockProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CompletionResult {
  std::string text;
  int attempts = 0;
};

CompletionResult llm_complete_detailed(const std::string& prompt, const LlmEndpoint& endpoint);
std::string llm_complete(const std::string& prompt, const LlmEndpoint& endpoint);

struct AnswerKey {
  std::string answer;
  std::vector<std::string> reasons;  // verbalized GT triplets
};

AnswerKey answer_key(const QARecord& r);

struct ParsedBlock {
  std::vector<std::string> knowledge;
  std::string context;
  std::string question;
};

// Parses the test block; throws MockProtocolError when the prompt does not follow the grammar.
ParsedBlock parse_test_block(const std::string& prompt);

std::string mock_llm(const std::string& prompt, const AnswerKey& key);

// First line, trimmed, terminal punctuation removed, lowercased.
std::string parse_answer(const std::string& completion);

}  // namespace kbvqa
