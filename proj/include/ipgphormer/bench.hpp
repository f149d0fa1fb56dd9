// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "ipgphormer/error.hpp"
#include "ipgphormer/format.hpp"
#include "ipgphormer/model.hpp"
#include "ipgphormer/rng.hpp"

namespace ipgphormer {

/// Quadratic-order SLA: materializes the N x N similarity map, row-normalizes it,
/// then multiplies by V. Benchmark baseline only.
inline Matrix sla_attention_quadratic(const Matrix& q, const Matrix& k, const Matrix& v, double eps) {
  const Matrix sim = q.cwiseMax(0.0) * k.cwiseMax(0.0).transpose();
  const Eigen::VectorXd den = sim.rowwise().sum().array() + eps;
  return (sim * v).array().colwise() / den.array();
}

struct BenchRow {
  int n = 0;
  int d = 0;
  double dense_ms = 0.0;
  double linear_ms = 0.0;
};

/// Fastest of `reps` per-call wall-clock measurements. Each rep repeats the call until
/// it spans at least 20 ms so sub-millisecond sizes are not timer noise.
inline std::vector<BenchRow> bench_attention(const std::vector<int>& sizes, int d, int reps, std::uint64_t seed) {
  if (d < 1 || reps < 1) throw UsageError("bench-attention: d and reps must be positive");
  constexpr double kMinRepMs = 20.0;
  std::vector<BenchRow> rows;
  Rng rng = Rng::derive(seed, 0xBE4C);
  volatile double sink = 0.0;
  auto time_ms = [&](auto&& fn) {
    std::vector<double> ts;
    for (int r = 0; r < reps; ++r) {
      int calls = 0;
      double elapsed = 0.0;
      const auto t0 = std::chrono::steady_clock::now();
      while (elapsed < kMinRepMs) {
        const Matrix out = fn();
        sink = sink + out(0, 0);
        ++calls;
        elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      ts.push_back(elapsed / calls);
    }
    return *std::min_element(ts.begin(), ts.end());
  };
  for (int n : sizes) {
    if (n < 1) throw UsageError("bench-attention: sizes must be positive");
    Matrix q(n, d), k(n, d), v(n, d);
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      q.data()[i] = rng.normal();
      k.data()[i] = rng.normal();
      v.data()[i] = rng.normal();
    }
    BenchRow row{n, d, 0.0, 0.0};
    row.dense_ms = time_ms([&] { return sla_attention_quadratic(q, k, v, 1e-6); });
    row.linear_ms = time_ms([&] { return sla_attention(q, k, v, 1e-6); });
    rows.push_back(row);
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "n,d,dense_ms,linear_ms\n";
  for (const auto& r : rows) {
    out += std::to_string(r.n) + ',' + std::to_string(r.d) + ',' + fmt_double(r.dense_ms) + ',' +
           fmt_double(r.linear_ms) + '\n';
  }
  return out;
}

/// Least-squares slope of log(ms) against log(n).
inline double loglog_slope(const std::vector<BenchRow>& rows, bool dense) {
  if (rows.size() < 2) throw NumericError("loglog_slope: need at least two sizes");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double m = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.n));
    const double y = std::log(std::max(dense ? r.dense_ms : r.linear_ms, 1e-9));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

}  // namespace ipgphormer
