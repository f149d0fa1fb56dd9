// SPDX-License-Identifier: Apache-2.0
//
// Training: Adam with L2 weight decay, one slide per step, model selection by
// validation C-index, and k-fold cross-validation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipgphormer/checkpoint.hpp"
#include "ipgphormer/cohort.hpp"
#include "ipgphormer/folds.hpp"
#include "ipgphormer/graph.hpp"
#include "ipgphormer/model.hpp"
#include "ipgphormer/rng.hpp"
#include "ipgphormer/survival.hpp"

namespace ipgphormer {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-6;
  int epochs = 40;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  int k_low = 8;
  int k_high = 8;
  int n_folds = 5;    // geometry of the split plan
  int run_folds = 5;  // how many of the plan's folds to train
  int threads = 0;    // 0: hardware concurrency
  ModelConfig model;

  void validate() const {
    if (!(lr > 0.0) || weight_decay < 0.0 || epochs < 1 || k_low < 1 || k_high < 1) {
      throw UsageError("train config: rates must be positive, epochs >= 1, K >= 1");
    }
    if (run_folds < 1 || run_folds > n_folds) throw UsageError("train config: run_folds outside [1, n_folds]");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},           {"weight_decay", c.weight_decay}, {"epochs", c.epochs},
                     {"beta1", c.beta1},     {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
                     {"seed", c.seed},       {"k_low", c.k_low},               {"k_high", c.k_high},
                     {"n_folds", c.n_folds}, {"run_folds", c.run_folds},       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig def;
  c.lr = j.value("lr", def.lr);
  c.weight_decay = j.value("weight_decay", def.weight_decay);
  c.epochs = j.value("epochs", def.epochs);
  c.beta1 = j.value("beta1", def.beta1);
  c.beta2 = j.value("beta2", def.beta2);
  c.adam_eps = j.value("adam_eps", def.adam_eps);
  c.seed = j.value("seed", def.seed);
  c.k_low = j.value("k_low", def.k_low);
  c.k_high = j.value("k_high", def.k_high);
  c.n_folds = j.value("n_folds", def.n_folds);
  c.run_folds = j.value("run_folds", def.run_folds);
  c.threads = j.value("threads", def.threads);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is handled by
/// exactly one worker, so writes to per-index slots need no synchronization.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

/// theta <- theta - lr * mhat / (sqrt(vhat) + eps) on g + weight_decay * theta.
inline void adam_step(ParamStore& params, const std::vector<Matrix>& grads, AdamState& state,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw NumericError("adam_step: gradient count mismatch");
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.push_back(Matrix::Zero(params.value(i).rows(), params.value(i).cols()));
      state.v.push_back(state.m.back());
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& theta = params.value(i);
    if (grads[i].rows() != theta.rows() || grads[i].cols() != theta.cols()) {
      throw NumericError("adam_step: shape mismatch for " + params.name(i));
    }
    const Matrix g = grads[i] + cfg.weight_decay * theta;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    theta.array() -= cfg.lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.adam_eps);
  }
}

// ---------------------------------------------------------------------------

struct PreparedSlide {
  std::string slide_id;
  MultiScaleGraph graph;
  Matrix x_low;
  Matrix x_high;
  SurvivalLabel label;
};

/// Graphs and double-precision features for every slide, built once per cohort.
struct PreparedCohort {
  std::vector<PreparedSlide> slides;
  std::map<std::string, std::size_t> index;

  std::vector<std::size_t> indices(const std::vector<std::string>& ids) const {
    std::vector<std::size_t> out;
    for (const auto& id : ids) {
      auto it = index.find(id);
      if (it == index.end()) throw DataError("unknown slide id '" + id + "'");
      out.push_back(it->second);
    }
    return out;
  }

  std::vector<SurvivalLabel> labels(const std::vector<std::size_t>& idx) const {
    std::vector<SurvivalLabel> out;
    for (auto i : idx) out.push_back(slides[i].label);
    return out;
  }
};

inline PreparedCohort prepare_cohort(const Cohort& cohort, int k_low, int k_high, int threads = 1) {
  PreparedCohort pc;
  pc.slides.resize(cohort.slides.size());
  parallel_for(cohort.slides.size(), threads, [&](std::size_t i) {
    const SlideBundle& s = cohort.slides[i];
    PreparedSlide& ps = pc.slides[i];
    ps.slide_id = s.slide_id;
    ps.graph = build_multiscale(s, k_low, k_high, cohort.footprint_half_width);
    ps.x_low = s.node_features(Scale::Low);
    ps.x_high = s.node_features(Scale::High);
    ps.label = s.label;
  });
  for (std::size_t i = 0; i < pc.slides.size(); ++i) pc.index[pc.slides[i].slide_id] = i;
  return pc;
}

/// Loss and parameter gradients of one slide.
inline double slide_loss_and_grads(const Model& model, const PreparedSlide& s, const TimeBins& bins,
                                   std::vector<Matrix>& grads) {
  ad::Tape tape;
  const Leaves p = make_leaves(tape, model, true);
  ForwardResult r = forward_slide(tape, model, p, s.graph, s.x_low, s.x_high);
  Var loss = nll_survival_loss(r.slide_risk, p["bin_offsets"], s.label, bins);
  tape.backward(loss);
  grads.resize(p.vars.size());
  for (std::size_t i = 0; i < p.vars.size(); ++i) grads[i] = p.vars[i].grad();
  return loss.scalar();
}

inline std::vector<double> predict_risks(const Model& model, const PreparedCohort& pc,
                                         const std::vector<std::size_t>& idx, int threads) {
  std::vector<double> risks(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t k) {
    const PreparedSlide& s = pc.slides[idx[k]];
    risks[k] = predict_slide(model, s.graph, s.x_low, s.x_high).slide_risk;
  });
  return risks;
}

/// C-index, or 0.5 when the subset has no comparable pair.
inline double safe_cindex(const std::vector<double>& risks, const std::vector<SurvivalLabel>& labels) {
  try {
    return concordance_index(risks, labels);
  } catch (const NumericError&) {
    return 0.5;
  }
}

struct FoldResult {
  int fold = 0;
  double test_cindex = 0.5;
  int best_epoch = 0;  // 1-based
  std::string checkpoint_path;
  Checkpoint best;
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_cindex;
};

inline ModelConfig model_config_for(const TrainConfig& cfg, int d) {
  ModelConfig m = cfg.model;
  m.d = d;
  return m;
}

/// Trains on fold.train, keeps the epoch with the best validation C-index and
/// scores that checkpoint on fold.test.
inline FoldResult train_fold(const PreparedCohort& pc, int d, const Fold& fold, int fold_id,
                             const TrainConfig& cfg,
                             const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate();
  const int threads = resolve_threads(cfg.threads);
  const auto train_idx = pc.indices(fold.train);
  const auto val_idx = pc.indices(fold.val);
  const auto test_idx = pc.indices(fold.test);
  const ModelConfig mcfg = model_config_for(cfg, d);
  const TimeBins bins = quantize_time_bins(pc.labels(train_idx), mcfg.bins);

  Model model = init_model(mcfg, Rng::derive(cfg.seed, 100 + fold_id).next());
  AdamState adam;
  Rng order_rng = Rng::derive(cfg.seed, 200 + fold_id);
  const auto val_labels = pc.labels(val_idx);

  FoldResult res;
  res.fold = fold_id;
  double best_val = -1.0;
  std::vector<std::size_t> order = train_idx;
  std::vector<Matrix> grads;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t i : order) {
      total += slide_loss_and_grads(model, pc.slides[i], bins, grads);
      adam_step(model.params, grads, adam, cfg);
    }
    res.epoch_train_loss.push_back(total / static_cast<double>(order.size()));
    const double val_c = safe_cindex(predict_risks(model, pc, val_idx, threads), val_labels);
    res.epoch_val_cindex.push_back(val_c);
    if (val_c > best_val) {
      best_val = val_c;
      res.best_epoch = epoch;
      res.best.model = model;
    }
  }
  res.best.bins = bins;
  res.test_cindex = safe_cindex(predict_risks(res.best.model, pc, test_idx, threads), pc.labels(test_idx));
  res.best.meta = {{"fold", fold_id},
                   {"best_epoch", res.best_epoch},
                   {"test_cindex", res.test_cindex},
                   {"train", cfg}};
  if (out_dir) {
    const auto path = *out_dir / ("fold_" + std::to_string(fold_id)) / "checkpoint.bin";
    save_checkpoint(path, res.best);
    res.checkpoint_path = path.string();
  }
  return res;
}

struct CrossValResult {
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double std = 0.0;
  FoldPlan plan;

  nlohmann::json metrics_json(const TrainConfig& cfg) const {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& r : folds) {
      f.push_back({{"fold", r.fold}, {"test_cindex", r.test_cindex}, {"best_epoch", r.best_epoch}});
    }
    return {{"folds", f}, {"mean", mean}, {"std", std}, {"config", cfg}};
  }
};

/// Sample standard deviation (zero for a single value).
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline CrossValResult cross_validate(const Cohort& cohort, const TrainConfig& cfg,
                                     const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                     const PreparedCohort* prepared = nullptr) {
  cfg.validate();
  PreparedCohort local;
  if (!prepared) {
    local = prepare_cohort(cohort, cfg.k_low, cfg.k_high, resolve_threads(cfg.threads));
    prepared = &local;
  }
  CrossValResult cv;
  cv.plan = split_folds(cohort, cfg.n_folds, cfg.seed);
  // Folds are independent; spare threads go to whole folds first.
  const int threads = resolve_threads(cfg.threads);
  const int fold_workers = std::min(threads, cfg.run_folds);
  TrainConfig inner = cfg;
  inner.threads = std::max(1, threads / fold_workers);
  cv.folds.resize(static_cast<std::size_t>(cfg.run_folds));
  parallel_for(cv.folds.size(), fold_workers, [&](std::size_t f) {
    cv.folds[f] = train_fold(*prepared, cohort.d, cv.plan.folds[f], static_cast<int>(f), inner, out_dir);
  });
  std::vector<double> cs;
  for (const auto& r : cv.folds) cs.push_back(r.test_cindex);
  for (double c : cs) cv.mean += c;
  cv.mean /= static_cast<double>(cs.size());
  cv.std = sample_std(cs);
  if (out_dir) write_text(*out_dir / "metrics.json", cv.metrics_json(cfg).dump(2) + "\n");
  return cv;
}

}  // namespace ipgphormer
