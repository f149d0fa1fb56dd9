// SPDX-License-Identifier: Apache-2.0
//
// Synthetic cohort generator with a known ground-truth hazard.
//
// Generative model, per slide:
//   * LOW patches sit on a G x G grid with pitch 2w (w = footprint half-width);
//     HIGH patches on the aligned 2G x 2G grid with pitch w, so every LOW
//     footprint contains exactly a 2 x 2 block of HIGH patches.
//   * Tumor share a ~ Beta(1/2, 1/2); lymphocyte share b ~ (1 - a) Beta(1/2, 1/2).
//     The round(a N) HIGH patches with the largest value of a smooth field of
//     Gaussian bumps around `tumor_clusters` random centers become type 0
//     ("tumor"); the round(b N) remaining patches nearest a second set of
//     centers become type 1 (inflammatory). The rest draw uniformly from {2,3,4}.
//   * HIGH features: mu_type + feature_noise * N(0, I), with cohort-wide type
//     means mu_type ~ N(0, feature_sep^2 I). LOW features: mean of the four
//     children's type means + low_noise * N(0, I).
//   * Cell statistics per HIGH patch: tumor_fraction, lymphocyte_fraction
//     (both high on their own patch type, near zero elsewhere) followed by
//     signal-free columns.
//   * log-hazard = lambda_tumor * mean(tumor_fraction) - lambda_lymph * mean(lymphocyte_fraction);
//     event time ~ Exponential(base_rate * exp(log-hazard)).
//   * Censoring: each slide independently censored with probability
//     censor_fraction, observed at a uniform fraction of its event time.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/rng.hpp"

namespace ipgphormer {

struct SynthConfig {
  int n_slides = 200;
  int grid = 10;
  int d = 32;
  int p = 4;
  int tumor_clusters = 3;
  double lambda_tumor = 2.0;
  double lambda_lymph = 4.0;
  double censor_fraction = 0.3;
  double base_rate = 1.0 / 30.0;  // per month
  double feature_sep = 1.0;
  double feature_noise = 1.0;
  double low_noise = 0.5;
  double half_width = 128.0;  // micrometers
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_slides", c.n_slides},       {"grid", c.grid},
                     {"d", c.d},                     {"p", c.p},
                     {"tumor_clusters", c.tumor_clusters}, {"lambda_tumor", c.lambda_tumor},
                     {"lambda_lymph", c.lambda_lymph},     {"censor_fraction", c.censor_fraction},
                     {"base_rate", c.base_rate},           {"feature_sep", c.feature_sep},
                     {"feature_noise", c.feature_noise},   {"low_noise", c.low_noise},
                     {"half_width", c.half_width}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  const SynthConfig def;
  c.n_slides = j.value("n_slides", def.n_slides);
  c.grid = j.value("grid", def.grid);
  c.d = j.value("d", def.d);
  c.p = j.value("p", def.p);
  c.tumor_clusters = j.value("tumor_clusters", def.tumor_clusters);
  c.lambda_tumor = j.value("lambda_tumor", def.lambda_tumor);
  c.lambda_lymph = j.value("lambda_lymph", def.lambda_lymph);
  c.censor_fraction = j.value("censor_fraction", def.censor_fraction);
  c.base_rate = j.value("base_rate", def.base_rate);
  c.feature_sep = j.value("feature_sep", def.feature_sep);
  c.feature_noise = j.value("feature_noise", def.feature_noise);
  c.low_noise = j.value("low_noise", def.low_noise);
  c.half_width = j.value("half_width", def.half_width);
}

inline std::vector<std::string> synth_cell_feature_names(int p) {
  std::vector<std::string> names{"tumor_fraction", "lymphocyte_fraction", "cell_density",
                                 "mean_nuclear_area"};
  names.resize(std::min<std::size_t>(names.size(), static_cast<std::size_t>(p)));
  for (int i = static_cast<int>(names.size()); i < p; ++i) names.push_back("noise_" + std::to_string(i));
  return names;
}

namespace detail {

/// Marks the `count` unassigned HIGH patches with the largest bump-field value.
inline void assign_clustered(std::vector<int>& types, const std::vector<double>& xs,
                             const std::vector<double>& ys, int count, int type, int n_centers,
                             double extent, Rng& rng) {
  const std::size_t n = types.size();
  std::vector<std::pair<double, double>> centers;
  for (int c = 0; c < std::max(1, n_centers); ++c)
    centers.emplace_back(rng.uniform(0.0, extent), rng.uniform(0.0, extent));
  const double sigma = 0.2 * extent;
  std::vector<std::pair<double, std::size_t>> score;
  for (std::size_t i = 0; i < n; ++i) {
    if (types[i] >= 0) continue;
    double f = 0.0;
    for (auto [cx, cy] : centers) {
      const double dx = xs[i] - cx, dy = ys[i] - cy;
      f += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
    score.emplace_back(-f, i);
  }
  std::sort(score.begin(), score.end());
  for (int k = 0; k < count && k < static_cast<int>(score.size()); ++k) types[score[k].second] = type;
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace detail

/// Deterministic in (cfg, seed). Slide i draws from its own derived stream.
inline Cohort synth_cohort(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_slides <= 0 || cfg.grid <= 0) throw UsageError("synth: need at least one slide and one patch");
  if (cfg.d <= 0) throw UsageError("synth: feature dimension must be positive");
  if (cfg.p < 2) throw UsageError("synth: need p >= 2 (tumor and lymphocyte fractions)");
  if (cfg.censor_fraction < 0.0 || cfg.censor_fraction >= 1.0) {
    throw UsageError("synth: censor_fraction must lie in [0, 1)");
  }
  Cohort cohort;
  cohort.d = cfg.d;
  cohort.p = cfg.p;
  cohort.cell_feature_names = synth_cell_feature_names(cfg.p);
  cohort.footprint_half_width = cfg.half_width;

  Rng global = Rng::derive(seed, 0);
  std::vector<Eigen::VectorXd> type_mean(kNumPatchTypes);
  for (auto& mu : type_mean) {
    mu.resize(cfg.d);
    for (int j = 0; j < cfg.d; ++j) mu(j) = global.normal(0.0, cfg.feature_sep);
  }

  const int G = cfg.grid;
  const int GH = 2 * G;
  const double w = cfg.half_width;
  const double extent = 2.0 * w * G;
  for (int s = 0; s < cfg.n_slides; ++s) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(s) + 1);
    SlideBundle slide;
    char id[32];
    std::snprintf(id, sizeof(id), "slide_%04d", s);
    slide.slide_id = id;

    const int n_high = GH * GH;
    std::vector<double> hx(n_high), hy(n_high);
    for (int i = 0; i < GH; ++i) {
      for (int j = 0; j < GH; ++j) {
        hx[i * GH + j] = 0.5 * w + w * j;
        hy[i * GH + j] = 0.5 * w + w * i;
      }
    }
    const double a = rng.arcsine();
    const double b = (1.0 - a) * rng.arcsine();
    std::vector<int> types(n_high, -1);
    detail::assign_clustered(types, hx, hy, static_cast<int>(std::lround(a * n_high)), 0,
                             cfg.tumor_clusters, extent, rng);
    detail::assign_clustered(types, hx, hy, static_cast<int>(std::lround(b * n_high)), 1,
                             cfg.tumor_clusters, extent, rng);
    for (auto& t : types)
      if (t < 0) t = 2 + static_cast<int>(rng.below(3));

    slide.features_low.resize(G * G, cfg.d);
    slide.features_high.resize(n_high, cfg.d);
    for (int i = 0; i < G; ++i) {
      for (int j = 0; j < G; ++j) {
        const int li = i * G + j;
        slide.patches.push_back({li, Scale::Low, w + 2.0 * w * j, w + 2.0 * w * i, -1, li});
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.d);
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) mean += type_mean[types[(2 * i + di) * GH + 2 * j + dj]];
        mean /= 4.0;
        for (int k = 0; k < cfg.d; ++k)
          slide.features_low(li, k) = static_cast<float>(mean(k) + rng.normal(0.0, cfg.low_noise));
      }
    }
    double tumor_sum = 0.0, lymph_sum = 0.0;
    for (int h = 0; h < n_high; ++h) {
      slide.patches.push_back({h, Scale::High, hx[h], hy[h], types[h], h});
      for (int k = 0; k < cfg.d; ++k) {
        slide.features_high(h, k) =
            static_cast<float>(type_mean[types[h]](k) + rng.normal(0.0, cfg.feature_noise));
      }
      CellStats cs;
      cs.patch_id = h;
      const double tumor = types[h] == 0 ? detail::clamp01(rng.normal(0.8, 0.08))
                                         : detail::clamp01(rng.normal(0.04, 0.03));
      const double lymph = types[h] == 1 ? detail::clamp01(rng.normal(0.7, 0.08))
                                         : detail::clamp01(rng.normal(0.05, 0.03));
      cs.values.push_back(tumor);
      cs.values.push_back(lymph);
      for (int k = 2; k < cfg.p; ++k) {
        const double v = k == 2 ? rng.normal(0.5, 0.1) : k == 3 ? rng.normal(30.0, 5.0) : rng.normal();
        cs.values.push_back(static_cast<float>(v));
      }
      tumor_sum += tumor;
      lymph_sum += lymph;
      slide.cell_stats.push_back(std::move(cs));
    }
    const double log_hazard =
        cfg.lambda_tumor * tumor_sum / n_high - cfg.lambda_lymph * lymph_sum / n_high;
    slide.true_log_hazard = log_hazard;
    double t = rng.exponential(cfg.base_rate * std::exp(log_hazard));
    slide.label.event = true;
    if (rng.uniform() < cfg.censor_fraction) {
      slide.label.event = false;
      t *= 1.0 - rng.uniform();
    }
    slide.label.time = t;
    cohort.slides.push_back(std::move(slide));
  }
  return cohort;
}

}  // namespace ipgphormer
