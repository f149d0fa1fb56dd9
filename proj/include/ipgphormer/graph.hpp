// SPDX-License-Identifier: Apache-2.0
//
// Multi-scale tissue graph: K-NN graphs over LOW and HIGH patch centers, the
// renormalized adjacency D^-1/2 (A + I) D^-1/2 of each, and the HIGH -> LOW
// parent map obtained by projecting HIGH centers onto LOW footprints.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SparseCore>

#include "ipgphormer/autodiff.hpp"
#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/format.hpp"

namespace ipgphormer {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Undirected edge list; each edge stored once with first < second, sorted.
using EdgeSet = std::vector<std::pair<int, int>>;

struct SparseEntry {
  int row = 0;
  int col = 0;
  double value = 0.0;
};

struct SparseAdjacency {
  int n = 0;
  std::vector<SparseEntry> entries;  // sorted by (row, col)

  ad::SparseMatrix matrix() const {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(entries.size());
    for (const auto& e : entries) trip.emplace_back(e.row, e.col, e.value);
    ad::SparseMatrix m(n, n);
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
  }

  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    for (const auto& e : entries) m(e.row, e.col) = e.value;
    return m;
  }
};

/// K nearest neighbors under Euclidean distance, symmetrized by union.
/// Self is excluded and distance ties go to the lower node index.
inline EdgeSet knn_edges(std::span<const Point> coords, int k) {
  const int n = static_cast<int>(coords.size());
  if (k < 0) throw UsageError("knn_edges: K must be non-negative");
  if (n < k + 1) {
    throw DataError("knn_edges: need at least K+1=" + std::to_string(k + 1) + " nodes, got " +
                    std::to_string(n));
  }
  for (const auto& p : coords) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("knn_edges: non-finite coordinate");
  }
  EdgeSet edges;
  edges.reserve(static_cast<std::size_t>(n) * k);
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords[i].x - coords[j].x;
      const double dy = coords[i].y - coords[j].y;
      cand.emplace_back(dx * dx + dy * dy, j);
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int r = 0; r < k; ++r) {
      const int j = cand[r].second;
      edges.emplace_back(std::min(i, j), std::max(i, j));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

/// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I.
inline SparseAdjacency normalize_adjacency(const EdgeSet& edges, int n) {
  std::vector<std::vector<int>> nbr(n);
  for (int i = 0; i < n; ++i) nbr[i].push_back(i);
  for (auto [a, b] : edges) {
    if (a < 0 || b < 0 || a >= n || b >= n || a == b) {
      throw DataError("normalize_adjacency: invalid edge (" + std::to_string(a) + "," +
                      std::to_string(b) + ")");
    }
    nbr[a].push_back(b);
    nbr[b].push_back(a);
  }
  for (auto& v : nbr) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  std::vector<double> inv_sqrt_deg(n);
  for (int i = 0; i < n; ++i) inv_sqrt_deg[i] = 1.0 / std::sqrt(static_cast<double>(nbr[i].size()));
  SparseAdjacency adj;
  adj.n = n;
  for (int i = 0; i < n; ++i) {
    for (int j : nbr[i]) adj.entries.push_back({i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]});
  }
  return adj;
}

/// Parent LOW index for every HIGH center; footprints are squares of half-width w.
inline std::vector<int> cross_scale_edges(std::span<const Point> low, double half_width,
                                          std::span<const Point> high,
                                          std::span<const int> high_ids = {}) {
  std::vector<int> parent(high.size(), -1);
  for (std::size_t h = 0; h < high.size(); ++h) {
    for (std::size_t l = 0; l < low.size(); ++l) {
      if (std::abs(high[h].x - low[l].x) <= half_width && std::abs(high[h].y - low[l].y) <= half_width) {
        parent[h] = static_cast<int>(l);
        break;
      }
    }
    if (parent[h] < 0) {
      const int id = high_ids.empty() ? static_cast<int>(h) : high_ids[h];
      throw DataError("cross_scale_edges: HIGH patch " + std::to_string(id) +
                      " lies outside every LOW footprint");
    }
  }
  return parent;
}

struct MultiScaleGraph {
  int n_low = 0;
  int n_high = 0;
  SparseAdjacency adj_low;
  SparseAdjacency adj_high;
  std::vector<int> parent;                 // HIGH node -> LOW node
  std::vector<std::vector<int>> children;  // LOW node -> HIGH nodes, ascending
  std::vector<int> types_high;
  std::vector<Point> coords_low;
  std::vector<Point> coords_high;
  std::vector<int> low_patch_ids;
  std::vector<int> high_patch_ids;

  // Model-ready views derived from the fields above by finalize().
  ad::SparseMatrix a_low;
  ad::SparseMatrix a_high;
  ad::SparseMatrix child_mean;  // n_low x n_high, row v averages C(v); empty rows when C(v) is empty
  std::vector<int> low_dst, low_src, high_dst, high_src;  // message edges incl. self loops

  void finalize() {
    a_low = adj_low.matrix();
    a_high = adj_high.matrix();
    children.assign(n_low, {});
    for (int h = 0; h < n_high; ++h) children[parent[h]].push_back(h);
    std::vector<Eigen::Triplet<double>> trip;
    for (int v = 0; v < n_low; ++v) {
      const double w = children[v].empty() ? 0.0 : 1.0 / static_cast<double>(children[v].size());
      for (int h : children[v]) trip.emplace_back(v, h, w);
    }
    child_mean = ad::SparseMatrix(n_low, n_high);
    child_mean.setFromTriplets(trip.begin(), trip.end());
    auto edges = [](const SparseAdjacency& a, std::vector<int>& dst, std::vector<int>& src) {
      dst.clear();
      src.clear();
      for (const auto& e : a.entries) {
        dst.push_back(e.row);
        src.push_back(e.col);
      }
    };
    edges(adj_low, low_dst, low_src);
    edges(adj_high, high_dst, high_src);
  }
};

/// Builds the multi-scale graph of one slide. K is clamped to n - 1 for slides
/// with too few patches at a scale.
inline MultiScaleGraph build_multiscale(const SlideBundle& slide, int k_low = 8, int k_high = 8,
                                        double half_width = 128.0) {
  MultiScaleGraph g;
  const auto low = slide.patches_at(Scale::Low);
  const auto high = slide.patches_at(Scale::High);
  if (low.empty() || high.empty()) {
    throw DataError("slide '" + slide.slide_id + "': needs LOW and HIGH patches");
  }
  g.n_low = static_cast<int>(low.size());
  g.n_high = static_cast<int>(high.size());
  for (const auto& r : low) {
    g.coords_low.push_back({r.x, r.y});
    g.low_patch_ids.push_back(r.patch_id);
  }
  for (const auto& r : high) {
    g.coords_high.push_back({r.x, r.y});
    g.high_patch_ids.push_back(r.patch_id);
    g.types_high.push_back(r.type_id);
  }
  const int kl = std::min(k_low, g.n_low - 1);
  const int kh = std::min(k_high, g.n_high - 1);
  g.adj_low = normalize_adjacency(knn_edges(g.coords_low, kl), g.n_low);
  g.adj_high = normalize_adjacency(knn_edges(g.coords_high, kh), g.n_high);
  try {
    g.parent = cross_scale_edges(g.coords_low, half_width, g.coords_high, g.high_patch_ids);
  } catch (const DataError& e) {
    throw DataError("slide '" + slide.slide_id + "': " + e.what());
  }
  g.finalize();
  return g;
}

/// Debug dump: adj_low.csv, adj_high.csv (row,col,value) and parents.csv (high_id,low_id).
inline void write_graph_dump(const MultiScaleGraph& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto dump_adj = [](const SparseAdjacency& a, const std::filesystem::path& p) {
    std::ofstream out(p);
    out << "row,col,value\n";
    for (const auto& e : a.entries) out << e.row << ',' << e.col << ',' << fmt_double(e.value) << '\n';
  };
  dump_adj(g.adj_low, dir / "adj_low.csv");
  dump_adj(g.adj_high, dir / "adj_high.csv");
  std::ofstream out(dir / "parents.csv");
  out << "high_id,low_id\n";
  for (int h = 0; h < g.n_high; ++h) {
    out << g.high_patch_ids[h] << ',' << g.low_patch_ids[g.parent[h]] << '\n';
  }
}

}  // namespace ipgphormer
