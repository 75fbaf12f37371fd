#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kbvqa {

// Lowercase, split on anything that is not [a-z0-9]. Underscores separate.
std::vector<std::string> tokenize(std::string_view text);

// Articles, copulas, prepositions and the template words of the question
// generator. Used only by keyword matching, never by embeddings.
const std::vector<std::string>& default_stop_words();
bool is_stop_word(std::string_view token);

// "fire_truck" -> "fire truck": underscores and whitespace runs become one space, ends trimmed.
std::string spaced(std::string_view text);
// spaced() plus lowercasing.
std::string normalize_surface(std::string_view text);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace kbvqa
