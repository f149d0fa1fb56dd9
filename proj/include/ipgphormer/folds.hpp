// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/rng.hpp"
#include "ipgphormer/survival.hpp"

namespace ipgphormer {

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct FoldPlan {
  int n_folds = 5;
  std::vector<Fold> folds;
};

/// Cross-validation plan. Slides are shuffled once; fold f tests on chunk f of an
/// even n_folds-way partition, validates on the next round(n / n_folds) slides in
/// cyclic order and trains on the rest. With 5 folds this is a 60:20:20 split and
/// the test chunks are disjoint across folds.
inline FoldPlan split_folds(const Cohort& cohort, int n_folds, std::uint64_t seed) {
  const int n = static_cast<int>(cohort.slides.size());
  if (n_folds < 2) throw UsageError("split_folds: need at least 2 folds");
  if (n < n_folds) {
    throw DataError("split_folds: " + std::to_string(n) + " slides is too few for " +
                    std::to_string(n_folds) + " folds");
  }
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0xF01D);
  rng.shuffle(order);

  std::vector<int> start(n_folds + 1);
  for (int f = 0; f <= n_folds; ++f) start[f] = static_cast<int>((static_cast<std::int64_t>(n) * f) / n_folds);
  const int n_val = std::max(1, static_cast<int>(std::lround(static_cast<double>(n) / n_folds)));

  FoldPlan plan;
  plan.n_folds = n_folds;
  for (int f = 0; f < n_folds; ++f) {
    Fold fold;
    std::vector<bool> used(n, false);
    for (int i = start[f]; i < start[f + 1]; ++i) {
      fold.test.push_back(cohort.slides[order[i]].slide_id);
      used[i] = true;
    }
    for (int k = 0, i = start[f + 1] % n; k < n_val; ++k, i = (i + 1) % n) {
      if (used[i]) break;
      fold.val.push_back(cohort.slides[order[i]].slide_id);
      used[i] = true;
    }
    for (int i = 0; i < n; ++i)
      if (!used[i]) fold.train.push_back(cohort.slides[order[i]].slide_id);
    if (fold.train.empty() || fold.val.empty() || fold.test.empty()) {
      throw DataError("split_folds: cohort too small for a train/val/test split");
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

/// Interior edges at the 1/T, ..., (T-1)/T quantiles of the uncensored times
/// (linear interpolation between order statistics). Coinciding edges are pushed
/// up in steps of 0.001 months so the bins stay non-empty intervals.
inline TimeBins quantize_time_bins(const std::vector<SurvivalLabel>& train_labels, int T) {
  if (T < 1) throw UsageError("quantize_time_bins: T must be at least 1");
  std::vector<double> times;
  for (const auto& l : train_labels)
    if (l.event) times.push_back(l.time);
  if (static_cast<int>(times.size()) < T) {
    throw DataError("quantize_time_bins: " + std::to_string(times.size()) +
                    " uncensored events, need at least T=" + std::to_string(T));
  }
  std::sort(times.begin(), times.end());
  TimeBins bins;
  const double last = static_cast<double>(times.size() - 1);
  for (int k = 1; k < T; ++k) {
    const double pos = last * k / T;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, times.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    double edge = times[lo] + frac * (times[hi] - times[lo]);
    if (!bins.edges.empty() && edge <= bins.edges.back()) edge = bins.edges.back() + 0.001;
    bins.edges.push_back(edge);
  }
  return bins;
}

}  // namespace ipgphormer
