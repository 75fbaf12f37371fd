#include "kbvqa/text.hpp"

#include <algorithm>

namespace kbvqa {

namespace {

bool is_word_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

char lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char raw : text) {
    char c = lower(raw);
    if (is_word_char(c)) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

const std::vector<std::string>& default_stop_words() {
  static const std::vector<std::string> words = {
      "a",  "an",   "the",  "is",  "are", "was",      "were",   "be",   "been",
      "of", "and",  "or",   "to",  "in",  "on",       "at",     "for",  "with",
      "by", "what", "which", "relation", "object", "that", "this"};
  return words;
}

bool is_stop_word(std::string_view token) {
  const auto& words = default_stop_words();
  return std::find(words.begin(), words.end(), token) != words.end();
}

std::string spaced(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (c == '_' || c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string normalize_surface(std::string_view text) {
  std::string out = spaced(text);
  for (char& c : out) c = lower(c);
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace kbvqa
