// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. `run` holds all the logic so tests can drive it
// in-process; tools/ipgphormer_cli.cpp only forwards argv.
//
// Exit codes: 0 ok, 1 usage, 2 data validation, 3 numeric failure.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ipgphormer/bench.hpp"
#include "ipgphormer/checkpoint.hpp"
#include "ipgphormer/cohort_io.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/folds.hpp"
#include "ipgphormer/interpret.hpp"
#include "ipgphormer/synth.hpp"
#include "ipgphormer/train.hpp"

namespace ipgphormer::cli {

inline constexpr const char* kOutDirEnv = "IPGPHORMER_OUT_DIR";

namespace detail {

inline std::filesystem::path out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  throw UsageError("no output directory: pass --out or set " + std::string(kOutDirEnv));
}

inline std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> sizes;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      sizes.push_back(parse_int(item, "--sizes"));
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  if (sizes.empty()) throw UsageError("--sizes: empty list");
  return sizes;
}

inline void apply_ablation(const std::string& mode, ModelConfig& m) {
  if (mode == "none") return;
  if (mode == "no-tie") {
    m.tie = false;
  } else if (mode == "no-hie") {
    m.hie = false;
  } else if (mode == "no-tie-hie") {
    m.tie = m.hie = false;
  } else {
    throw UsageError("--ablate: expected none, no-tie, no-hie or no-tie-hie, got '" + mode + "'");
  }
}

/// Slide ids of `split` for the fold recorded in a checkpoint ("all" needs no fold).
inline std::vector<std::string> split_ids(const Cohort& cohort, const Checkpoint& ck, const std::string& split) {
  std::vector<std::string> ids;
  if (split == "all") {
    for (const auto& s : cohort.slides) ids.push_back(s.slide_id);
    return ids;
  }
  if (!ck.meta.contains("fold") || !ck.meta.contains("train")) {
    throw DataError("checkpoint carries no fold record; use --split all");
  }
  const TrainConfig tc = ck.meta.at("train").get<TrainConfig>();
  const int fold = ck.meta.at("fold").get<int>();
  const FoldPlan plan = split_folds(cohort, tc.n_folds, tc.seed);
  if (fold < 0 || fold >= static_cast<int>(plan.folds.size())) throw DataError("checkpoint fold out of range");
  const Fold& f = plan.folds[fold];
  if (split == "train") return f.train;
  if (split == "val") return f.val;
  if (split == "test") return f.test;
  throw UsageError("--split: expected all, train, val or test, got '" + split + "'");
}

inline Cohort subset(const Cohort& cohort, const std::vector<std::string>& ids) {
  Cohort c = cohort;
  c.slides.clear();
  for (const auto& id : ids) c.slides.push_back(cohort.find(id));
  if (c.slides.empty()) throw DataError("selected split contains no slides");
  return c;
}

}  // namespace detail

struct Options {
  int threads = 0;
  std::optional<std::uint64_t> seed;  // default 7; a config file's seed wins over the default
  std::string out;
  std::string config;
  std::string manifest;
  std::string checkpoint;
  std::string split = "all";
  std::string ablate = "none";
  std::string sizes = "512,1024,2048,4096";
  int bench_dim = 64;
  int bench_reps = 3;
  int k_extreme = 10;
  std::optional<int> folds, epochs, hidden, n_blocks, k_low, k_high, n_slides;
  std::optional<double> lr;
  bool verbose = false;
};

inline int cmd_synth(const Options& o, std::ostream& out) {
  const auto dir = detail::out_dir(o.out);
  SynthConfig cfg = read_json(o.config).get<SynthConfig>();
  if (o.n_slides) cfg.n_slides = *o.n_slides;
  const Cohort cohort = synth_cohort(cfg, o.seed.value_or(7));
  const auto manifest = write_cohort(cohort, dir);
  out << "wrote " << cohort.slides.size() << " slides to " << manifest.string() << '\n';
  return 0;
}

inline TrainConfig train_config(const Options& o) {
  TrainConfig tc;
  if (!o.config.empty()) tc = read_json(o.config).get<TrainConfig>();
  if (o.seed) tc.seed = *o.seed;
  if (o.threads > 0) tc.threads = o.threads;
  if (o.folds) tc.run_folds = *o.folds;
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.lr) tc.lr = *o.lr;
  if (o.hidden) tc.model.hidden = *o.hidden;
  if (o.n_blocks) tc.model.n_blocks = *o.n_blocks;
  if (o.k_low) tc.k_low = *o.k_low;
  if (o.k_high) tc.k_high = *o.k_high;
  detail::apply_ablation(o.ablate, tc.model);
  tc.validate();
  return tc;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const auto dir = detail::out_dir(o.out);
  const TrainConfig tc = train_config(o);
  const Cohort cohort = load_cohort(o.manifest);
  const CrossValResult cv = cross_validate(cohort, tc, dir);
  for (const auto& f : cv.folds) {
    std::string hist = "epoch,train_loss,val_cindex\n";
    for (std::size_t e = 0; e < f.epoch_train_loss.size(); ++e) {
      hist += std::to_string(e + 1) + ',' + fmt_double(f.epoch_train_loss[e]) + ',' +
              fmt_double(f.epoch_val_cindex[e]) + '\n';
    }
    write_text(dir / ("fold_" + std::to_string(f.fold)) / "history.csv", hist);
    out << "fold " << f.fold << ": test C-index " << f.test_cindex << " (best epoch " << f.best_epoch << ")\n";
  }
  out << "mean C-index " << cv.mean << " +- " << cv.std << '\n';
  return 0;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const auto dir = detail::out_dir(o.out);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Cohort cohort = load_cohort(o.manifest);
  const Cohort sel = detail::subset(cohort, detail::split_ids(cohort, ck, o.split));
  const int k_low = ck.meta.contains("train") ? ck.meta["train"].value("k_low", 8) : 8;
  const int k_high = ck.meta.contains("train") ? ck.meta["train"].value("k_high", 8) : 8;
  const PreparedCohort pc = prepare_cohort(sel, k_low, k_high, resolve_threads(o.threads));
  std::vector<std::size_t> idx(pc.slides.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto risks = predict_risks(ck.model, pc, idx, resolve_threads(o.threads));
  const auto labels = pc.labels(idx);
  const double c = concordance_index(risks, labels);
  nlohmann::json report{{"split", o.split}, {"n", risks.size()}, {"cindex", c}};
  std::string risk_csv = "slide_id,risk,time,event\n";
  for (std::size_t i = 0; i < idx.size(); ++i) {
    risk_csv += pc.slides[i].slide_id + ',' + fmt_double(risks[i]) + ',' + fmt_double(labels[i].time) + ',' +
                (labels[i].event ? "1" : "0") + '\n';
  }
  write_text(dir / "slide_risks.csv", risk_csv);
  const MedianSplit ms = median_split_km(risks, labels);
  report["median_risk"] = ms.median;
  report["logrank"] = {{"statistic", ms.test.statistic}, {"p", ms.test.p}};
  write_text(dir / "km.csv", km_csv(ms));
  write_text(dir / "eval.json", report.dump(2) + "\n");
  out << "C-index " << c << " on " << risks.size() << " slides; log-rank p " << ms.test.p << '\n';
  return 0;
}

inline int cmd_interpret(const Options& o, std::ostream& out) {
  const auto dir = detail::out_dir(o.out);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Cohort cohort = load_cohort(o.manifest);
  if (cohort.slides.empty()) throw DataError("cohort has no slides");
  const Cohort sel = detail::subset(cohort, detail::split_ids(cohort, ck, o.split));
  const int k_low = ck.meta.contains("train") ? ck.meta["train"].value("k_low", 8) : 8;
  const int k_high = ck.meta.contains("train") ? ck.meta["train"].value("k_high", 8) : 8;
  const int threads = resolve_threads(o.threads);
  const PreparedCohort pc = prepare_cohort(sel, k_low, k_high, threads);
  std::vector<RiskMap> maps(pc.slides.size());
  parallel_for(pc.slides.size(), threads, [&](std::size_t i) {
    const auto& s = pc.slides[i];
    maps[i] = patch_risk_map(ck.model, s.slide_id, s.graph, s.x_low, s.x_high);
  });
  std::string slide_csv = "slide_id,slide_risk,mean_patch_risk\n";
  for (const auto& m : maps) {
    const double mean = mean_of(m.risks);
    if (mean != m.slide_risk) throw NumericError("slide '" + m.slide_id + "': slide risk differs from patch mean");
    write_risk_map_csv(dir / "risk_maps" / (m.slide_id + ".csv"), m);
    slide_csv += m.slide_id + ',' + fmt_double(m.slide_risk) + ',' + fmt_double(mean) + '\n';
  }
  write_text(dir / "slide_risks.csv", slide_csv);
  const ExtremePatchSet ex = select_extreme_patches(maps, sel, o.k_extreme);
  const CellCoxResult cox = cell_cox_analysis(ex);
  write_text(dir / "cox_report.json", cox.report().dump(2) + "\n");
  write_text(dir / "feature_distribution.csv", cox.distribution_csv());
  out << "risk maps for " << maps.size() << " slides; Cox fit on " << cox.n_rows << " patches ("
      << (cox.cox.converged ? "converged" : "not converged") << ")\n";
  for (std::size_t j = 0; j < cox.names.size(); ++j) {
    out << "  " << cox.names[j] << ": gamma " << cox.cox.gamma[j] << ", z " << cox.cox.z(j) << '\n';
  }
  return 0;
}

inline int cmd_bench(const Options& o, std::ostream& out) {
  const auto dir = detail::out_dir(o.out);
  const auto rows = bench_attention(detail::parse_sizes(o.sizes), o.bench_dim, o.bench_reps, o.seed.value_or(7));
  write_text(dir / "bench_attention.csv", bench_csv(rows));
  if (rows.size() >= 2) {
    out << "log-log slope: dense " << loglog_slope(rows, true) << ", linear " << loglog_slope(rows, false) << '\n';
  }
  for (const auto& r : rows) {
    out << "n=" << r.n << " dense " << r.dense_ms << " ms, linear " << r.linear_ms << " ms\n";
  }
  return 0;
}

/// Parses and dispatches; never throws.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-scale graph transformer for survival prediction from whole-slide patch features",
               "ipgphormer"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Options o;
  app.add_option("--threads", o.threads, "worker threads (default: all cores)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", o.seed, "random seed (default 7)");

  auto* synth = app.add_subcommand("synth", "write a synthetic cohort");
  synth->add_option("--config", o.config, "SynthConfig JSON")->required();
  synth->add_option("--out", o.out, "output directory");
  synth->add_option("--n-slides", o.n_slides, "override n_slides");

  auto* train = app.add_subcommand("train", "cross-validated training");
  train->add_option("--manifest", o.manifest, "cohort manifest")->required();
  train->add_option("--config", o.config, "TrainConfig JSON");
  train->add_option("--out", o.out, "output directory");
  train->add_option("--folds", o.folds, "train only the first N folds of the plan");
  train->add_option("--epochs", o.epochs);
  train->add_option("--lr", o.lr);
  train->add_option("--hidden", o.hidden);
  train->add_option("--blocks", o.n_blocks);
  train->add_option("--k-low", o.k_low);
  train->add_option("--k-high", o.k_high);
  train->add_option("--ablate", o.ablate, "none | no-tie | no-hie | no-tie-hie");

  auto* eval = app.add_subcommand("eval", "C-index and median-split KM for a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint)->required();
  eval->add_option("--manifest", o.manifest)->required();
  eval->add_option("--split", o.split, "all | train | val | test");
  eval->add_option("--out", o.out, "output directory");

  auto* interp = app.add_subcommand("interpret", "risk maps and cell-level Cox analysis");
  interp->add_option("--checkpoint", o.checkpoint)->required();
  interp->add_option("--manifest", o.manifest)->required();
  interp->add_option("--split", o.split, "all | train | val | test");
  interp->add_option("--k", o.k_extreme, "top/bottom LOW patches per slide")->check(CLI::PositiveNumber);
  interp->add_option("--out", o.out, "output directory");

  auto* bench = app.add_subcommand("bench-attention", "time quadratic vs linear SLA");
  bench->add_option("--sizes", o.sizes, "comma-separated N values");
  bench->add_option("--dim", o.bench_dim)->check(CLI::PositiveNumber);
  bench->add_option("--reps", o.bench_reps)->check(CLI::PositiveNumber);
  bench->add_option("--out", o.out, "output directory");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 1;
  }
  try {
    if (*synth) return cmd_synth(o, out);
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*interp) return cmd_interpret(o, out);
    return cmd_bench(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace ipgphormer::cli
