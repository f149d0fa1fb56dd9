// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout:
//   8 bytes   magic "IPGPHCK1"
//   8 bytes   little-endian uint64 header length H
//   H bytes   JSON header: {"model": ModelConfig, "time_bins": [...], "meta": {...},
//                           "params": [{"name", "rows", "cols", "offset"}]}
//   ...       parameter values, float64 little-endian, column-major per matrix;
//             "offset" counts doubles from the start of this section.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ipgphormer/cohort_io.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/model.hpp"
#include "ipgphormer/survival.hpp"

namespace ipgphormer {

inline constexpr char kCheckpointMagic[8] = {'I', 'P', 'G', 'P', 'H', 'C', 'K', '1'};

struct Checkpoint {
  Model model;
  TimeBins bins;
  nlohmann::json meta = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
    const Matrix& v = ck.model.params.value(i);
    params.push_back({{"name", ck.model.params.name(i)}, {"rows", v.rows()}, {"cols", v.cols()}, {"offset", offset}});
    offset += static_cast<std::size_t>(v.size());
  }
  const nlohmann::json header{{"model", ck.model.cfg}, {"time_bins", ck.bins.edges}, {"meta", ck.meta}, {"params", params}};
  const std::string text = header.dump();
  std::string blob(kCheckpointMagic, 8);
  const std::uint64_t len = text.size();
  blob.append(reinterpret_cast<const char*>(&len), sizeof(len));
  blob += text;
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
    const Matrix& v = ck.model.params.value(i);
    blob.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(double));
  }
  write_text(path, blob);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const std::string blob = read_text(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), kCheckpointMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  std::uint64_t len = 0;
  std::memcpy(&len, blob.data() + 8, sizeof(len));
  if (16 + len > blob.size()) throw DataError("truncated checkpoint header: " + path.string());
  Checkpoint ck;
  std::size_t data_start = 16 + static_cast<std::size_t>(len);
  try {
    const auto header = nlohmann::json::parse(blob.substr(16, static_cast<std::size_t>(len)));
    ck.model.cfg = header.at("model").get<ModelConfig>();
    ck.bins.edges = header.at("time_bins").get<std::vector<double>>();
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& p : header.at("params")) {
      const auto rows = p.at("rows").get<Eigen::Index>();
      const auto cols = p.at("cols").get<Eigen::Index>();
      const auto off = p.at("offset").get<std::size_t>();
      const std::size_t begin = data_start + off * sizeof(double);
      const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (begin + bytes > blob.size()) throw DataError("truncated checkpoint data: " + path.string());
      Matrix m(rows, cols);
      if (bytes) std::memcpy(m.data(), blob.data() + begin, bytes);
      ck.model.params.add(p.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace ipgphormer
