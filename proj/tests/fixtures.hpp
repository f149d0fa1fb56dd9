// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipgphormer/cohort.hpp"
#include "ipgphormer/graph.hpp"
#include "ipgphormer/model.hpp"
#include "ipgphormer/rng.hpp"

namespace fixtures {

using namespace ipgphormer;

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// A slide with a gl_x x gl_y LOW grid (pitch 2w) and the aligned HIGH grid (pitch w),
/// random types, features and cell statistics.
inline SlideBundle grid_slide(Rng& rng, int gl_x, int gl_y, int d, int p, const std::string& id = "toy",
                              double w = 128.0) {
  SlideBundle s;
  s.slide_id = id;
  const int n_low = gl_x * gl_y;
  const int n_high = 4 * n_low;
  s.features_low.resize(n_low, d);
  s.features_high.resize(n_high, d);
  for (int i = 0; i < gl_y; ++i)
    for (int j = 0; j < gl_x; ++j) {
      const int li = i * gl_x + j;
      s.patches.push_back({li, Scale::Low, w + 2 * w * j, w + 2 * w * i, -1, li});
    }
  for (int i = 0; i < 2 * gl_y; ++i)
    for (int j = 0; j < 2 * gl_x; ++j) {
      const int hi = i * 2 * gl_x + j;
      s.patches.push_back({hi, Scale::High, 0.5 * w + w * j, 0.5 * w + w * i, static_cast<int>(rng.below(5)), hi});
      CellStats cs{hi, {}};
      for (int k = 0; k < p; ++k) cs.values.push_back(rng.uniform());
      s.cell_stats.push_back(cs);
    }
  for (Eigen::Index i = 0; i < s.features_low.size(); ++i) s.features_low.data()[i] = static_cast<float>(rng.normal());
  for (Eigen::Index i = 0; i < s.features_high.size(); ++i) s.features_high.data()[i] = static_cast<float>(rng.normal());
  s.label = {1.0 + 50.0 * rng.uniform(), rng.uniform() < 0.7};
  return s;
}

/// 6 LOW / 24 HIGH slide used by the gradient checks.
inline SlideBundle toy_slide(std::uint64_t seed, int d = 3, int p = 2) {
  Rng rng(seed);
  return grid_slide(rng, 3, 2, d, p);
}

inline Cohort grid_cohort(std::uint64_t seed, int n, int gl, int d, int p) {
  Rng rng(seed);
  Cohort c;
  c.d = d;
  c.p = p;
  for (int k = 0; k < p; ++k) c.cell_feature_names.push_back("f" + std::to_string(k));
  for (int i = 0; i < n; ++i) c.slides.push_back(grid_slide(rng, gl, gl, d, p, "s" + std::to_string(100 + i)));
  return c;
}

inline ModelConfig small_config(int d, int hidden = 4) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.hidden = hidden;
  cfg.gat_layers = 2;
  cfg.prop_steps = 2;
  cfg.n_blocks = 2;
  return cfg;
}

/// neighbors[v] = sources of v from a message edge list.
inline std::vector<std::vector<int>> in_lists(const std::vector<int>& dst, const std::vector<int>& src, int n) {
  std::vector<std::vector<int>> out(n);
  for (std::size_t e = 0; e < dst.size(); ++e) out[dst[e]].push_back(src[e]);
  return out;
}

}  // namespace fixtures
