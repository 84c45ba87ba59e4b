#ifndef RIMNAV_TESTS_TEST_UTIL_HPP_
#define RIMNAV_TESTS_TEST_UTIL_HPP_

#include <string>
#include <vector>

#include "rimnav/gridworld.hpp"

namespace testutil {

/// Builds a world from rows of text: '#' wall, '.' free, '0'-'9' object category.
inline rimnav::GridWorld ascii_world(const std::vector<std::string>& rows, int categories = 6) {
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows.front().size());
  std::vector<uint8_t> occ(static_cast<size_t>(w) * h, 0);
  std::vector<rimnav::ObjectInstance> objects;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const char ch = rows[y][x];
      if (ch == '#') occ[static_cast<size_t>(y) * w + x] = 1;
      if (ch >= '0' && ch <= '9') objects.push_back({ch - '0', {x, y}});
    }
  }
  rimnav::WorldConfig cfg;
  cfg.width = w;
  cfg.height = h;
  cfg.categories = categories;
  return rimnav::GridWorld(w, h, std::move(occ), std::move(objects), 0, cfg);
}

inline rimnav::GridWorld open_world(int w, int h, int categories = 6) {
  std::vector<std::string> rows(h, std::string(w, '.'));
  for (int x = 0; x < w; ++x) rows[0][x] = rows[h - 1][x] = '#';
  for (int y = 0; y < h; ++y) rows[y][0] = rows[y][w - 1] = '#';
  return ascii_world(rows, categories);
}

}  // namespace testutil

#endif  // RIMNAV_TESTS_TEST_UTIL_HPP_
