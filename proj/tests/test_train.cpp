// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "fixtures.hpp"
#include "ipgphormer/checkpoint.hpp"
#include "ipgphormer/synth.hpp"
#include "ipgphormer/train.hpp"

namespace {

using namespace ipgphormer;
namespace fs = std::filesystem;

TrainConfig tiny_train() {
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = 1e-3;
  tc.seed = 5;
  tc.threads = 1;
  tc.model.hidden = 6;
  tc.model.n_blocks = 2;
  tc.model.gat_layers = 2;
  tc.model.prop_steps = 2;
  return tc;
}

Cohort tiny_cohort(int n = 25, std::uint64_t seed = 3) {
  SynthConfig sc;
  sc.n_slides = n;
  sc.grid = 3;
  sc.d = 5;
  sc.p = 3;
  return synth_cohort(sc, seed);
}

TEST(Adam, ZeroGradientZeroDecayLeavesParameters) {
  ParamStore p;
  p.add("w", Matrix::Constant(2, 2, 0.7));
  AdamState st;
  TrainConfig tc;
  tc.weight_decay = 0.0;
  adam_step(p, {Matrix::Zero(2, 2)}, st, tc);
  EXPECT_EQ(p["w"], Matrix::Constant(2, 2, 0.7));
}

TEST(Adam, HandRecurrenceOneParameter) {
  ParamStore p;
  p.add("w", Matrix::Constant(1, 1, 0.5));
  AdamState st;
  TrainConfig tc;
  tc.lr = 0.01;
  tc.weight_decay = 0.1;
  double theta = 0.5, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -1.2, 0.05, 2.0};
  for (int t = 1; t <= 4; ++t) {
    adam_step(p, {Matrix::Constant(1, 1, grads[t - 1])}, st, tc);
    const double g = grads[t - 1] + 0.1 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
    theta -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(p["w"](0, 0), theta, 1e-15);
  }
  // First step moves by about lr against the gradient sign.
  ParamStore q;
  q.add("w", Matrix::Constant(1, 1, 0.0));
  AdamState s2;
  tc.weight_decay = 0.0;
  adam_step(q, {Matrix::Constant(1, 1, 3.0)}, s2, tc);
  EXPECT_NEAR(q["w"](0, 0), -0.01, 1e-9);
}

TEST(Adam, ShapeMismatch) {
  ParamStore p;
  p.add("w", Matrix::Zero(2, 2));
  AdamState st;
  EXPECT_THROW(adam_step(p, {Matrix::Zero(2, 3)}, st, TrainConfig{}), NumericError);
  EXPECT_THROW(adam_step(p, {}, st, TrainConfig{}), NumericError);
}

TEST(Train, ConfigValidation) {
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(tc.validate(), UsageError);
  tc = TrainConfig{};
  tc.lr = -1;
  EXPECT_THROW(tc.validate(), UsageError);
  tc = TrainConfig{};
  tc.run_folds = 6;
  EXPECT_THROW(tc.validate(), UsageError);
  const nlohmann::json j = tiny_train();
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(back.model.hidden, 6);
  EXPECT_EQ(back.lr, 1e-3);
}

TEST(Train, DeterministicFoldAndThreadIndependent) {
  const Cohort c = tiny_cohort();
  TrainConfig tc = tiny_train();
  const FoldPlan plan = split_folds(c, 5, tc.seed);
  const PreparedCohort pc = prepare_cohort(c, 8, 8, 1);
  const FoldResult a = train_fold(pc, c.d, plan.folds[0], 0, tc);
  tc.threads = 3;
  const PreparedCohort pc3 = prepare_cohort(c, 8, 8, 3);
  const FoldResult b = train_fold(pc3, c.d, plan.folds[0], 0, tc);
  ASSERT_EQ(a.best.model.params.size(), b.best.model.params.size());
  for (std::size_t i = 0; i < a.best.model.params.size(); ++i)
    EXPECT_EQ(a.best.model.params.value(i), b.best.model.params.value(i));
  EXPECT_EQ(a.test_cindex, b.test_cindex);
  EXPECT_EQ(a.epoch_train_loss, b.epoch_train_loss);
  EXPECT_GE(a.best_epoch, 1);
  EXPECT_LE(a.best_epoch, tc.epochs);
  EXPECT_GE(a.test_cindex, 0.0);
  EXPECT_LE(a.test_cindex, 1.0);
}

TEST(Train, CheckpointReloadReproducesTestCIndex) {
  const Cohort c = tiny_cohort();
  const TrainConfig tc = tiny_train();
  const auto dir = fs::temp_directory_path() / "ipg_train_ck";
  fs::remove_all(dir);
  const FoldPlan plan = split_folds(c, 5, tc.seed);
  const PreparedCohort pc = prepare_cohort(c, 8, 8, 1);
  const FoldResult r = train_fold(pc, c.d, plan.folds[1], 1, tc, dir);
  ASSERT_TRUE(fs::exists(r.checkpoint_path));
  const Checkpoint ck = load_checkpoint(r.checkpoint_path);
  EXPECT_EQ(ck.bins.edges, r.best.bins.edges);
  EXPECT_EQ(ck.meta.at("best_epoch").get<int>(), r.best_epoch);
  const auto idx = pc.indices(plan.folds[1].test);
  const double again = safe_cindex(predict_risks(ck.model, pc, idx, 1), pc.labels(idx));
  EXPECT_EQ(again, r.test_cindex);
  EXPECT_EQ(again, ck.meta.at("test_cindex").get<double>());
}

TEST(Train, AblationVariantsRun) {
  const Cohort c = tiny_cohort(20);
  TrainConfig tc = tiny_train();
  tc.epochs = 1;
  tc.n_folds = 4;
  tc.run_folds = 1;
  for (auto [tie, hie] : {std::pair{false, false}, std::pair{true, false}, std::pair{false, true}}) {
    tc.model.tie = tie;
    tc.model.hie = hie;
    const CrossValResult cv = cross_validate(c, tc);
    ASSERT_EQ(cv.folds.size(), 1u);
    EXPECT_EQ(cv.std, 0.0);
  }
}

TEST(Train, CrossValidationMetricsJson) {
  const Cohort c = tiny_cohort(20);
  TrainConfig tc = tiny_train();
  tc.epochs = 1;
  tc.n_folds = 4;
  tc.run_folds = 2;
  tc.threads = 2;
  const auto dir = fs::temp_directory_path() / "ipg_train_cv";
  fs::remove_all(dir);
  const CrossValResult cv = cross_validate(c, tc, dir);
  const nlohmann::json m = read_json(dir / "metrics.json");
  ASSERT_EQ(m.at("folds").size(), 2u);
  EXPECT_EQ(m.at("folds")[1].at("fold").get<int>(), 1);
  EXPECT_NEAR(m.at("mean").get<double>(), 0.5 * (cv.folds[0].test_cindex + cv.folds[1].test_cindex), 1e-15);
  EXPECT_NEAR(m.at("std").get<double>(), sample_std({cv.folds[0].test_cindex, cv.folds[1].test_cindex}), 1e-15);
  EXPECT_TRUE(m.at("config").contains("lr"));
  EXPECT_TRUE(fs::exists(dir / "fold_1" / "checkpoint.bin"));
  // Same run on one thread gives the same numbers.
  tc.threads = 1;
  const CrossValResult serial = cross_validate(c, tc);
  EXPECT_EQ(serial.mean, cv.mean);
}

TEST(Train, TrainingLossDecreasesEarly) {
  // Seed-averaged training loss over the first five epochs on a cohort without feature noise.
  SynthConfig sc;
  sc.n_slides = 30;
  sc.grid = 3;
  sc.d = 6;
  sc.p = 2;
  sc.feature_noise = 0.0;
  sc.low_noise = 0.0;
  std::vector<double> mean_loss(5, 0.0);
  for (std::uint64_t seed : {1, 2, 3}) {
    const Cohort c = synth_cohort(sc, seed);
    TrainConfig tc = tiny_train();
    tc.epochs = 5;
    tc.seed = seed;
    const PreparedCohort pc = prepare_cohort(c, 8, 8, 1);
    const FoldResult r = train_fold(pc, c.d, split_folds(c, 5, seed).folds[0], 0, tc);
    for (int e = 0; e < 5; ++e) mean_loss[e] += r.epoch_train_loss[e] / 3.0;
  }
  for (int e = 1; e < 5; ++e) EXPECT_LE(mean_loss[e], mean_loss[e - 1]) << "epoch " << e + 1;
}

TEST(Checkpoint, RoundTripAndErrors) {
  Checkpoint ck;
  ck.model = init_model(fixtures::small_config(4), 3);
  ck.bins.edges = {1.5, 2.5, 9.0};
  ck.meta = {{"note", "x"}};
  const auto dir = fs::temp_directory_path() / "ipg_ck";
  fs::remove_all(dir);
  save_checkpoint(dir / "a.bin", ck);
  const Checkpoint back = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(back.bins.edges, ck.bins.edges);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.model.cfg.hidden, ck.model.cfg.hidden);
  ASSERT_EQ(back.model.params.size(), ck.model.params.size());
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
    EXPECT_EQ(back.model.params.name(i), ck.model.params.name(i));
    EXPECT_EQ(back.model.params.value(i), ck.model.params.value(i));
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), DataError);
  write_text(dir / "junk.bin", "not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), DataError);
  std::string blob = read_text(dir / "a.bin");
  write_text(dir / "cut.bin", blob.substr(0, blob.size() - 8));
  EXPECT_THROW(load_checkpoint(dir / "cut.bin"), DataError);
}

}  // namespace
