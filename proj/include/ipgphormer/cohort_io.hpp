// SPDX-License-Identifier: Apache-2.0
//
// On-disk cohort layout:
//
//   manifest.json                  d, p, type_vocab, cell_feature_names, slides[]
//   <slide>/patches.csv            patch_id,scale,x_um,y_um,type_id,feat_row
//   <slide>/features_low.f32       little-endian float32, row-major
//   <slide>/features_low.f32.meta.json   {"rows": R, "cols": C}
//   <slide>/features_high.f32 (+ .meta.json)
//   <slide>/cell_stats.csv         patch_id,<name_1>,...,<name_p>
//
// Paths inside the manifest are resolved relative to the manifest's directory.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/format.hpp"

namespace ipgphormer {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "feature I/O assumes a little-endian host");

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

inline Eigen::MatrixXf read_feature_matrix(const fs::path& p) {
  fs::path meta_path = p;
  meta_path += ".meta.json";
  const json meta = read_json(meta_path);
  const auto rows = meta.at("rows").get<std::int64_t>();
  const auto cols = meta.at("cols").get<std::int64_t>();
  if (rows < 0 || cols < 0) throw DataError("negative shape in " + meta_path.string());
  const std::string bytes = read_text(p);
  const auto expected = static_cast<std::size_t>(rows * cols) * sizeof(float);
  if (bytes.size() != expected) {
    throw DataError("dimension mismatch: " + p.string() + " holds " + std::to_string(bytes.size()) +
                    " bytes, sidecar implies " + std::to_string(expected));
  }
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(rows, cols);
  if (expected > 0) std::memcpy(m.data(), bytes.data(), expected);
  return m;
}

inline void write_feature_matrix(const fs::path& p, const Eigen::MatrixXf& m) {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  std::string bytes(static_cast<std::size_t>(rm.size()) * sizeof(float), '\0');
  if (!bytes.empty()) std::memcpy(bytes.data(), rm.data(), bytes.size());
  write_text(p, bytes);
  fs::path meta_path = p;
  meta_path += ".meta.json";
  write_text(meta_path, json{{"rows", rm.rows()}, {"cols", rm.cols()}}.dump() + "\n");
}

namespace detail {

template <typename F>
void for_each_csv_row(const fs::path& p, const std::string& expected_header, F&& f) {
  std::istringstream in(read_text(p));
  std::string line;
  if (!std::getline(in, line)) throw DataError(p.string() + ": empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected_header) {
    throw DataError(p.string() + ": expected header '" + expected_header + "', got '" + line + "'");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    f(split_csv_line(line), p.string() + ":" + std::to_string(lineno));
  }
}

inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

}  // namespace detail

inline std::vector<PatchRecord> read_patch_table(const fs::path& p) {
  std::vector<PatchRecord> out;
  detail::for_each_csv_row(p, "patch_id,scale,x_um,y_um,type_id,feat_row",
                           [&](const auto& f, const std::string& ctx) {
                             if (f.size() != 6) throw DataError(ctx + ": expected 6 fields");
                             PatchRecord r;
                             r.patch_id = parse_int(f[0], ctx);
                             if (f[1] == "L") {
                               r.scale = Scale::Low;
                             } else if (f[1] == "H") {
                               r.scale = Scale::High;
                             } else {
                               throw DataError(ctx + ": scale must be L or H");
                             }
                             r.x = parse_double(f[2], ctx);
                             r.y = parse_double(f[3], ctx);
                             if (r.scale == Scale::Low) {
                               if (!f[4].empty()) throw DataError(ctx + ": LOW rows must leave type_id empty");
                               r.type_id = -1;
                             } else {
                               if (f[4].empty()) throw DataError(ctx + ": HIGH rows need a type_id");
                               r.type_id = parse_int(f[4], ctx);
                             }
                             r.feat_row = parse_int(f[5], ctx);
                             out.push_back(r);
                           });
  return out;
}

inline void write_patch_table(const fs::path& p, const std::vector<PatchRecord>& patches) {
  std::string s = "patch_id,scale,x_um,y_um,type_id,feat_row\n";
  for (const auto& r : patches) {
    s += std::to_string(r.patch_id) + ',' + (r.scale == Scale::Low ? "L" : "H") + ',' +
         fmt_double(r.x) + ',' + fmt_double(r.y) + ',' +
         (r.scale == Scale::High ? std::to_string(r.type_id) : std::string()) + ',' +
         std::to_string(r.feat_row) + '\n';
  }
  write_text(p, s);
}

inline std::vector<CellStats> read_cell_stats(const fs::path& p, const std::vector<std::string>& names) {
  std::vector<CellStats> out;
  const std::string header = "patch_id" + (names.empty() ? std::string() : "," + detail::join(names, ','));
  detail::for_each_csv_row(p, header, [&](const auto& f, const std::string& ctx) {
    if (f.size() != names.size() + 1) {
      throw DataError(ctx + ": dimension mismatch, expected " + std::to_string(names.size() + 1) + " fields");
    }
    CellStats c;
    c.patch_id = parse_int(f[0], ctx);
    for (std::size_t i = 1; i < f.size(); ++i) c.values.push_back(parse_double(f[i], ctx));
    out.push_back(std::move(c));
  });
  return out;
}

inline void write_cell_stats(const fs::path& p, const std::vector<std::string>& names,
                             const std::vector<CellStats>& stats) {
  std::string s = "patch_id" + (names.empty() ? std::string() : "," + detail::join(names, ',')) + "\n";
  for (const auto& c : stats) {
    s += std::to_string(c.patch_id);
    for (double v : c.values) s += ',' + fmt_double(v);
    s += '\n';
  }
  write_text(p, s);
}

/// Loads and fully validates a cohort from its manifest.
inline Cohort load_cohort(const fs::path& manifest_path) {
  const json m = read_json(manifest_path);
  const fs::path base = manifest_path.parent_path();
  Cohort c;
  try {
    c.d = m.at("d").get<int>();
    c.p = m.at("p").get<int>();
    if (m.contains("type_vocab")) c.type_vocab = m.at("type_vocab").get<std::vector<std::string>>();
    c.cell_feature_names = m.at("cell_feature_names").get<std::vector<std::string>>();
    if (m.contains("microns_per_pixel")) {
      // LOW patches are 256 px at the low magnification.
      c.footprint_half_width = 128.0 * m.at("microns_per_pixel").get<double>();
    }
    if (m.contains("footprint_half_width_um")) c.footprint_half_width = m.at("footprint_half_width_um").get<double>();
    for (const auto& js : m.at("slides")) {
      SlideBundle s;
      s.slide_id = js.at("slide_id").get<std::string>();
      s.label.time = js.at("time_months").get<double>();
      const int ev = js.at("event").get<int>();
      if (ev != 0 && ev != 1) throw DataError("slide '" + s.slide_id + "': event must be 0 or 1");
      s.label.event = ev == 1;
      if (js.contains("true_log_hazard")) s.true_log_hazard = js.at("true_log_hazard").get<double>();
      s.patches = read_patch_table(base / js.at("patch_table").get<std::string>());
      s.features_low = read_feature_matrix(base / js.at("features_low").get<std::string>());
      s.features_high = read_feature_matrix(base / js.at("features_high").get<std::string>());
      s.cell_stats = read_cell_stats(base / js.at("cell_stats").get<std::string>(), c.cell_feature_names);
      c.slides.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  validate_cohort(c);
  return c;
}

/// Writes `cohort` under `dir` (manifest.json plus one sub-directory per slide).
inline fs::path write_cohort(const Cohort& cohort, const fs::path& dir) {
  fs::create_directories(dir);
  json slides = json::array();
  for (const auto& s : cohort.slides) {
    const std::string sub = "slides/" + s.slide_id + "/";
    write_patch_table(dir / (sub + "patches.csv"), s.patches);
    write_feature_matrix(dir / (sub + "features_low.f32"), s.features_low);
    write_feature_matrix(dir / (sub + "features_high.f32"), s.features_high);
    write_cell_stats(dir / (sub + "cell_stats.csv"), cohort.cell_feature_names, s.cell_stats);
    json js{{"slide_id", s.slide_id},
            {"time_months", s.label.time},
            {"event", s.label.event ? 1 : 0},
            {"patch_table", sub + "patches.csv"},
            {"features_low", sub + "features_low.f32"},
            {"features_high", sub + "features_high.f32"},
            {"cell_stats", sub + "cell_stats.csv"}};
    if (s.true_log_hazard) js["true_log_hazard"] = *s.true_log_hazard;
    slides.push_back(std::move(js));
  }
  json m{{"d", cohort.d},
         {"p", cohort.p},
         {"type_vocab", cohort.type_vocab},
         {"cell_feature_names", cohort.cell_feature_names},
         {"footprint_half_width_um", cohort.footprint_half_width},
         {"slides", std::move(slides)}};
  const fs::path manifest = dir / "manifest.json";
  write_text(manifest, m.dump(2) + "\n");
  return manifest;
}

}  // namespace ipgphormer
