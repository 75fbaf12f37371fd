#pragma once

// Checkpoint helpers shared by the head and reasoner serializers.

#include <string>
#include <vector>

#include "json.hpp"
#include "kbvqa/encoder.hpp"
#include "kbvqa/numerics.hpp"

namespace kbvqa::detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

inline Matrix matrix_from(const nlohmann::json& j, const std::string& name) {
  try {
    auto rows = j.at("rows").get<std::size_t>();
    auto cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) throw CheckpointError("block " + name + " has wrong size");
    Matrix m(rows, cols, std::move(data));
    require_finite(m.values(), name.c_str());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("block " + name + ": " + e.what());
  }
}

}  // namespace kbvqa::detail
