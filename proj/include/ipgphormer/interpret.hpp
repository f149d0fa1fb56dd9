// SPDX-License-Identifier: Apache-2.0
//
// Tissue-level outputs: per-patch risk maps and a median-split KM comparison.
// Cell-level outputs: a Cox fit of HIGH-patch cell statistics against the
// model's patch ranking.
//
// The cell-level fit has no real time axis. Selected HIGH patches inherit the
// risk of their LOW parent; sorted by that risk, descending, they receive
// pseudo-times 1, 2, 3, ... and all count as events. A positive coefficient
// therefore means the feature is more pronounced where the model predicts
// higher risk. Only ranks enter, so any strictly increasing transform of the
// risks gives the same fit.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipgphormer/cohort.hpp"
#include "ipgphormer/cohort_io.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/format.hpp"
#include "ipgphormer/graph.hpp"
#include "ipgphormer/model.hpp"
#include "ipgphormer/survival.hpp"

namespace ipgphormer {

struct RiskMap {
  std::string slide_id;
  std::vector<int> patch_ids;  // LOW patches, graph order
  std::vector<double> x;
  std::vector<double> y;
  Eigen::VectorXd risks;
  double slide_risk = 0.0;
};

inline RiskMap patch_risk_map(const Model& model, const std::string& slide_id, const MultiScaleGraph& g,
                              const Matrix& x_low, const Matrix& x_high) {
  if (x_low.cols() != model.cfg.d) {
    throw DataError("slide '" + slide_id + "': feature width " + std::to_string(x_low.cols()) +
                    " does not match checkpoint d=" + std::to_string(model.cfg.d));
  }
  const SlidePrediction pred = predict_slide(model, g, x_low, x_high);
  RiskMap m;
  m.slide_id = slide_id;
  m.patch_ids = g.low_patch_ids;
  for (const auto& c : g.coords_low) {
    m.x.push_back(c.x);
    m.y.push_back(c.y);
  }
  m.risks = pred.patch_risks;
  m.slide_risk = pred.slide_risk;
  return m;
}

inline void write_risk_map_csv(const std::filesystem::path& path, const RiskMap& m) {
  std::string out = "slide_id,patch_id,x_um,y_um,risk\n";
  for (std::size_t i = 0; i < m.patch_ids.size(); ++i) {
    out += m.slide_id + ',' + std::to_string(m.patch_ids[i]) + ',' + fmt_double(m.x[i]) + ',' +
           fmt_double(m.y[i]) + ',' + fmt_double(m.risks(static_cast<Eigen::Index>(i))) + '\n';
  }
  write_text(path, out);
}

// ---------------------------------------------------------------------------

struct MedianSplit {
  double median = 0.0;
  std::vector<std::size_t> low;   // indices with risk <= median
  std::vector<std::size_t> high;  // indices with risk > median
  KMCurve km_low;
  KMCurve km_high;
  LogRankResult test;
};

/// Splits at the median risk (mean of the two middle values for even n); ties
/// join the low-risk group.
inline MedianSplit median_split_km(std::span<const double> risks, std::span<const SurvivalLabel> labels) {
  if (risks.size() != labels.size()) throw DataError("median_split_km: risk/label count mismatch");
  if (risks.size() < 2) throw DataError("median_split_km: need at least 2 slides");
  std::vector<double> sorted(risks.begin(), risks.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  MedianSplit s;
  s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<SurvivalLabel> lo, hi;
  for (std::size_t i = 0; i < n; ++i) {
    if (risks[i] <= s.median) {
      s.low.push_back(i);
      lo.push_back(labels[i]);
    } else {
      s.high.push_back(i);
      hi.push_back(labels[i]);
    }
  }
  if (hi.empty()) throw NumericError("median_split_km: all risks identical, cannot split at the median");
  s.km_low = kaplan_meier(lo);
  s.km_high = kaplan_meier(hi);
  s.test = log_rank_test(hi, lo);
  return s;
}

inline std::string km_csv(const MedianSplit& s) {
  std::string out = "group,time,survival,at_risk,events\n";
  auto rows = [&](const std::string& group, const KMCurve& km) {
    for (std::size_t i = 0; i < km.times.size(); ++i) {
      out += group + ',' + fmt_double(km.times[i]) + ',' + fmt_double(km.survival[i]) + ',' +
             std::to_string(km.at_risk[i]) + ',' + std::to_string(km.events[i]) + '\n';
    }
  };
  rows("low", s.km_low);
  rows("high", s.km_high);
  return out;
}

// ---------------------------------------------------------------------------

struct ExtremeRow {
  std::string slide_id;
  int low_patch_id = 0;
  int high_patch_id = 0;
  double risk = 0.0;  // inherited from the LOW parent
  bool top = false;   // in the top-k set (a patch may be in both when 2k > M)
  bool bottom = false;
  std::vector<double> cell;
};

struct ExtremePatchSet {
  int k = 0;
  std::vector<std::string> feature_names;
  std::vector<ExtremeRow> rows;  // sorted by (slide_id, high_patch_id)
};

/// Per slide, the k highest- and k lowest-risk LOW patches (risk ties broken by
/// patch id, k clamped to the slide's LOW count); every HIGH child of a selected
/// patch contributes one row carrying its cell statistics.
inline ExtremePatchSet select_extreme_patches(const std::vector<RiskMap>& maps, const Cohort& cohort, int k) {
  if (k < 1) throw UsageError("select_extreme_patches: k must be at least 1");
  ExtremePatchSet out;
  out.k = k;
  out.feature_names = cohort.cell_feature_names;
  for (const RiskMap& m : maps) {
    const SlideBundle& slide = cohort.find(m.slide_id);
    const std::size_t M = m.patch_ids.size();
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), M);
    std::vector<std::size_t> order(M);
    for (std::size_t i = 0; i < M; ++i) order[i] = i;
    auto by_risk = [&](bool descending) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ra = m.risks(static_cast<Eigen::Index>(a)), rb = m.risks(static_cast<Eigen::Index>(b));
        if (ra != rb) return descending ? ra > rb : ra < rb;
        return m.patch_ids[a] < m.patch_ids[b];
      });
      return std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk));
    };
    std::map<int, std::pair<bool, bool>> chosen;  // LOW patch id -> (top, bottom)
    std::map<int, double> risk_of;
    for (std::size_t i : by_risk(true)) chosen[m.patch_ids[i]].first = true;
    for (std::size_t i : by_risk(false)) chosen[m.patch_ids[i]].second = true;
    for (std::size_t i = 0; i < M; ++i) risk_of[m.patch_ids[i]] = m.risks(static_cast<Eigen::Index>(i));

    const auto low = slide.patches_at(Scale::Low);
    std::map<int, const CellStats*> stats;
    for (const auto& c : slide.cell_stats) stats[c.patch_id] = &c;
    for (const auto& h : slide.patches_at(Scale::High)) {
      const int li = containing_low(low, h.x, h.y, cohort.footprint_half_width);
      if (li < 0) continue;
      auto it = chosen.find(low[li].patch_id);
      if (it == chosen.end()) continue;
      auto cs = stats.find(h.patch_id);
      if (cs == stats.end()) continue;
      ExtremeRow r;
      r.slide_id = m.slide_id;
      r.low_patch_id = low[li].patch_id;
      r.high_patch_id = h.patch_id;
      r.risk = risk_of.at(r.low_patch_id);
      r.top = it->second.first;
      r.bottom = it->second.second;
      r.cell.assign(cs->second->values.begin(), cs->second->values.end());
      out.rows.push_back(std::move(r));
    }
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const ExtremeRow& a, const ExtremeRow& b) {
    return std::tie(a.slide_id, a.high_patch_id) < std::tie(b.slide_id, b.high_patch_id);
  });
  return out;
}

// ---------------------------------------------------------------------------

struct FeatureSummary {
  std::string name;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;  // of the z-scored column
};

struct CellCoxResult {
  CoxModel cox;
  std::vector<std::string> names;
  std::vector<FeatureSummary> summaries;
  std::size_t n_rows = 0;

  nlohmann::json report() const {
    nlohmann::json f = nlohmann::json::array();
    for (std::size_t j = 0; j < names.size(); ++j) {
      f.push_back({{"name", names[j]},
                   {"gamma", cox.gamma[j]},
                   {"se", cox.se[j]},
                   {"z", cox.z(j)},
                   {"p", cox.p_value(j)}});
    }
    return {{"features", f}, {"loglik", cox.loglik}, {"converged", cox.converged},
            {"iterations", cox.iters}, {"n_patches", n_rows}};
  }

  std::string distribution_csv() const {
    std::string out = "feature,min,q1,median,q3,max,gamma,z,p\n";
    for (std::size_t j = 0; j < summaries.size(); ++j) {
      const auto& s = summaries[j];
      out += s.name + ',' + fmt_double(s.min) + ',' + fmt_double(s.q1) + ',' + fmt_double(s.median) + ',' +
             fmt_double(s.q3) + ',' + fmt_double(s.max) + ',' + fmt_double(cox.gamma[j]) + ',' +
             fmt_double(cox.z(j)) + ',' + fmt_double(cox.p_value(j)) + '\n';
    }
    return out;
  }
};

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Pseudo-time labels: rank 1 for the highest risk; ties in risk keep input order.
inline std::vector<SurvivalLabel> rank_pseudo_times(std::span<const double> risks) {
  std::vector<std::size_t> order(risks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return risks[a] > risks[b]; });
  std::vector<SurvivalLabel> labels(risks.size());
  for (std::size_t r = 0; r < order.size(); ++r) labels[order[r]] = {static_cast<double>(r + 1), true};
  return labels;
}

inline CellCoxResult cell_cox_analysis(const ExtremePatchSet& set, const CoxOptions& opt = {}) {
  const std::size_t p = set.feature_names.size();
  const std::size_t n = set.rows.size();
  if (p == 0) throw DataError("cell_cox_analysis: no cell features");
  if (n < p + 2) {
    throw DataError("cell_cox_analysis: " + std::to_string(n) + " patches, need at least " + std::to_string(p + 2));
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  std::vector<double> risks(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (set.rows[i].cell.size() != p) throw DataError("cell_cox_analysis: ragged cell statistics");
    for (std::size_t j = 0; j < p; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = set.rows[i].cell[j];
    risks[i] = set.rows[i].risk;
  }
  CellCoxResult res;
  res.names = set.feature_names;
  res.n_rows = n;
  res.cox = cox_fit(x, rank_pseudo_times(risks), set.feature_names, opt);
  for (std::size_t j = 0; j < p; ++j) {
    const Eigen::VectorXd col = x.col(static_cast<Eigen::Index>(j));
    const double mu = col.mean();
    const double sd = std::sqrt((col.array() - mu).square().sum() / static_cast<double>(n - 1));
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = (col(static_cast<Eigen::Index>(i)) - mu) / sd;
    std::sort(z.begin(), z.end());
    res.summaries.push_back({set.feature_names[j], z.front(), quantile_sorted(z, 0.25), quantile_sorted(z, 0.5),
                             quantile_sorted(z, 0.75), z.back()});
  }
  return res;
}

}  // namespace ipgphormer
