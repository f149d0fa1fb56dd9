// SPDX-License-Identifier: Apache-2.0
//
// In-memory cohort data model: patches at two magnifications, per-patch cell
// statistics and a right-censored survival label per slide.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ipgphormer/error.hpp"

namespace ipgphormer {

enum class Scale { Low, High };

inline constexpr int kNumPatchTypes = 5;

inline const std::vector<std::string>& default_type_vocab() {
  static const std::vector<std::string> vocab{"neoplastic", "inflammatory", "connective", "dead",
                                              "epithelial"};
  return vocab;
}

struct SurvivalLabel {
  double time = 1.0;  // months
  bool event = false;
};

struct PatchRecord {
  int patch_id = 0;
  Scale scale = Scale::Low;
  double x = 0.0;  // micrometers, patch center
  double y = 0.0;
  int type_id = -1;  // [0, 4] for HIGH patches, -1 for LOW
  int feat_row = 0;  // row in the scale's feature matrix
};

struct CellStats {
  int patch_id = 0;  // HIGH patch
  std::vector<double> values;
};

struct SlideBundle {
  std::string slide_id;
  std::vector<PatchRecord> patches;
  Eigen::MatrixXf features_low;   // rows indexed by PatchRecord::feat_row
  Eigen::MatrixXf features_high;
  std::vector<CellStats> cell_stats;
  SurvivalLabel label;
  std::optional<double> true_log_hazard;  // synthetic cohorts only

  /// Patch records of one scale, in table order. Graph node i is the i-th entry.
  std::vector<PatchRecord> patches_at(Scale s) const {
    std::vector<PatchRecord> out;
    for (const auto& p : patches)
      if (p.scale == s) out.push_back(p);
    return out;
  }

  /// Node feature matrix for one scale in graph-node order.
  Eigen::MatrixXd node_features(Scale s) const {
    const auto recs = patches_at(s);
    const Eigen::MatrixXf& src = s == Scale::Low ? features_low : features_high;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(recs.size()), src.cols());
    for (std::size_t i = 0; i < recs.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = src.row(recs[i].feat_row).cast<double>();
    return out;
  }
};

struct Cohort {
  std::vector<SlideBundle> slides;
  int d = 768;
  int p = 0;
  std::vector<std::string> type_vocab = default_type_vocab();
  std::vector<std::string> cell_feature_names;
  double footprint_half_width = 128.0;  // micrometers

  const SlideBundle& find(const std::string& id) const {
    for (const auto& s : slides)
      if (s.slide_id == id) return s;
    throw DataError("no slide with id '" + id + "'");
  }

  std::vector<SurvivalLabel> labels() const {
    std::vector<SurvivalLabel> out;
    out.reserve(slides.size());
    for (const auto& s : slides) out.push_back(s.label);
    return out;
  }
};

/// Index of the LOW patch whose square footprint [x +- w, y +- w] contains (x, y);
/// the lowest index wins on shared boundaries. Returns -1 when none does.
inline int containing_low(const std::vector<PatchRecord>& low, double x, double y, double w) {
  for (std::size_t i = 0; i < low.size(); ++i) {
    if (std::abs(x - low[i].x) <= w && std::abs(y - low[i].y) <= w) return static_cast<int>(i);
  }
  return -1;
}

/// Checks every SlideBundle invariant; throws DataError naming the slide.
inline void validate_slide(const SlideBundle& s, int d, int p, double half_width) {
  const std::string where = "slide '" + s.slide_id + "': ";
  if (!(s.label.time > 0.0) || !std::isfinite(s.label.time)) {
    throw DataError(where + "survival time must be positive and finite");
  }
  if (s.features_low.cols() != d || s.features_high.cols() != d) {
    throw DataError(where + "dimension mismatch: feature width differs from cohort d=" +
                    std::to_string(d));
  }
  if (!s.features_low.allFinite() || !s.features_high.allFinite()) {
    throw DataError(where + "non-finite feature value");
  }
  std::set<int> low_ids, high_ids;
  std::size_t n_low = 0, n_high = 0;
  for (const auto& r : s.patches) {
    if (!std::isfinite(r.x) || !std::isfinite(r.y)) {
      throw DataError(where + "non-finite coordinate for patch " + std::to_string(r.patch_id));
    }
    auto& ids = r.scale == Scale::Low ? low_ids : high_ids;
    if (!ids.insert(r.patch_id).second) {
      throw DataError(where + "duplicate patch_id " + std::to_string(r.patch_id));
    }
    const Eigen::MatrixXf& m = r.scale == Scale::Low ? s.features_low : s.features_high;
    if (r.feat_row < 0 || r.feat_row >= m.rows()) {
      throw DataError(where + "dimension mismatch: feat_row " + std::to_string(r.feat_row) +
                      " outside feature matrix with " + std::to_string(m.rows()) + " rows");
    }
    if (r.scale == Scale::Low) {
      ++n_low;
      if (r.type_id != -1) throw DataError(where + "LOW patch carries a type_id");
    } else {
      ++n_high;
      if (r.type_id < 0 || r.type_id >= kNumPatchTypes) {
        throw DataError(where + "HIGH patch " + std::to_string(r.patch_id) +
                        " has type_id outside [0,4]");
      }
    }
  }
  if (n_low == 0 || n_high == 0) throw DataError(where + "needs at least one LOW and one HIGH patch");
  if (static_cast<Eigen::Index>(n_low) != s.features_low.rows() ||
      static_cast<Eigen::Index>(n_high) != s.features_high.rows()) {
    throw DataError(where + "dimension mismatch: feature matrix rows differ from patch count");
  }
  const auto low = s.patches_at(Scale::Low);
  for (const auto& r : s.patches) {
    if (r.scale != Scale::High) continue;
    if (containing_low(low, r.x, r.y, half_width) < 0) {
      throw DataError(where + "HIGH patch " + std::to_string(r.patch_id) +
                      " is not contained in any LOW patch footprint");
    }
  }
  for (const auto& c : s.cell_stats) {
    if (static_cast<int>(c.values.size()) != p) {
      throw DataError(where + "dimension mismatch: cell stats width differs from p=" +
                      std::to_string(p));
    }
    if (!high_ids.count(c.patch_id)) {
      throw DataError(where + "cell stats reference unknown HIGH patch " + std::to_string(c.patch_id));
    }
    for (double v : c.values)
      if (!std::isfinite(v)) throw DataError(where + "non-finite cell statistic");
  }
}

inline void validate_cohort(const Cohort& c) {
  if (c.slides.empty()) throw DataError("cohort is empty");
  if (c.d <= 0) throw DataError("feature dimension d must be positive");
  if (static_cast<int>(c.type_vocab.size()) != kNumPatchTypes) {
    throw DataError("type_vocab must list exactly 5 names");
  }
  if (static_cast<int>(c.cell_feature_names.size()) != c.p) {
    throw DataError("cell_feature_names must list p names");
  }
  std::set<std::string> ids;
  for (const auto& s : c.slides) {
    if (!ids.insert(s.slide_id).second) throw DataError("duplicate slide_id '" + s.slide_id + "'");
    validate_slide(s, c.d, c.p, c.footprint_half_width);
  }
}

}  // namespace ipgphormer
