// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lum {

// Square boolean attention mask over a packed batch row.
// allowed(row, col) == true means position `row` may attend to `col`.
// A position whose row is entirely false is padding.
struct AttentionMask {
  enum class Mode { Training, GroupQuery };

  int size = 0;
  Mode mode = Mode::Training;
  std::vector<uint8_t> allowed;  // size * size, row-major

  AttentionMask() = default;
  AttentionMask(int n, Mode m) : size(n), mode(m), allowed(static_cast<size_t>(n) * n, 0) {}

  bool at(int row, int col) const {
    return allowed[static_cast<size_t>(row) * size + col] != 0;
  }
  void set(int row, int col, bool v) {
    allowed[static_cast<size_t>(row) * size + col] = v ? 1 : 0;
  }

  bool row_has_any(int row) const {
    const size_t base = static_cast<size_t>(row) * size;
    for (int c = 0; c < size; ++c)
      if (allowed[base + c]) return true;
    return false;
  }

  // 0/1 text grid, one row per line. Debug aid.
  std::string to_grid() const {
    std::string out;
    out.reserve(static_cast<size_t>(size) * (size + 1));
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) out.push_back(at(r, c) ? '1' : '0');
      out.push_back('\n');
    }
    return out;
  }
};

}  // namespace lum
