// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "ipgphormer/survival.hpp"
#include "oracles.hpp"

namespace {

using namespace ipgphormer;
using ad::Tape;

std::vector<SurvivalLabel> random_labels(Rng& rng, int n, double censor, bool integer_times = false) {
  std::vector<SurvivalLabel> y;
  for (int i = 0; i < n; ++i) {
    const double t = integer_times ? 1.0 + static_cast<double>(rng.below(8)) : rng.exponential(0.1);
    y.push_back({t, rng.uniform() >= censor});
  }
  return y;
}

TEST(NllLoss, HalfHazardSingleBin) {
  const TimeBins one{};
  const double b[] = {0.0};
  EXPECT_NEAR(nll_survival_loss(0.0, b, {3.0, true}, one), std::log(2.0), 1e-15);
  // Censored with the hazard driven to zero costs nothing.
  EXPECT_LT(nll_survival_loss(-50.0, b, {3.0, false}, one), 1e-20);
}

TEST(NllLoss, MatchesPathEnumeration) {
  Rng rng(41);
  const TimeBins bins{{10.0, 20.0, 40.0}};
  for (int trial = 0; trial < 200; ++trial) {
    const double risk = rng.normal(0.0, 2.0);
    std::vector<double> b(4);
    for (double& x : b) x = rng.normal(0.0, 1.5);
    const SurvivalLabel y{rng.uniform(0.5, 60.0), rng.uniform() < 0.6};
    const double want = oracle::nll_by_enumeration(risk, b, bins.bin_of(y.time), y.event);
    EXPECT_NEAR(nll_survival_loss(risk, b, y, bins), want, 1e-12 * std::max(1.0, want));
    Tape t;
    Var r = t.constant(Matrix::Constant(1, 1, risk));
    Var off = t.constant(Eigen::Map<const Matrix>(b.data(), 1, 4));
    EXPECT_NEAR(nll_survival_loss(r, off, y, bins).scalar(), want, 1e-12 * std::max(1.0, want));
  }
}

TEST(NllLoss, NonNegativeAndMonotoneForEarlyEvent) {
  const TimeBins one{};
  double prev = std::numeric_limits<double>::infinity();
  for (double r = -5; r <= 5; r += 0.25) {
    const double b[] = {0.0};
    const double l = nll_survival_loss(r, b, {1.0, true}, one);
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
  const double b[] = {0.0};
  EXPECT_THROW(nll_survival_loss(0.0, b, {std::nan(""), true}, one), NumericError);
}

TEST(NllLoss, GradientMatchesFiniteDifference) {
  const TimeBins bins{{1.0, 2.0, 3.0}};
  for (SurvivalLabel y : {SurvivalLabel{2.5, true}, SurvivalLabel{2.5, false}, SurvivalLabel{0.5, true}}) {
    const Matrix b = (Matrix(1, 4) << 0.3, -0.2, 0.1, 0.7).finished();
    auto via_offsets = [&](Tape& t, Var off) { return nll_survival_loss(t.constant(Matrix::Constant(1, 1, 0.4)), off, y, bins); };
    auto via_risk = [&](Tape& t, Var r) { return nll_survival_loss(r, t.constant(b), y, bins); };
    EXPECT_LT(ad::grad_check(via_offsets, b), 1e-6);
    EXPECT_LT(ad::grad_check(via_risk, Matrix::Constant(1, 1, 0.4)), 1e-6);
  }
}

TEST(CIndex, EqualsBruteForce) {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(49));
    const auto y = random_labels(rng, n, rng.uniform(0.0, 0.6), trial % 2 == 0);
    std::vector<double> risk(n);
    for (double& r : risk) r = trial % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.normal();
    bool comparable = false;
    for (const auto& a : y)
      for (const auto& b : y) comparable = comparable || (a.event && a.time < b.time);
    if (!comparable) {
      EXPECT_THROW(concordance_index(risk, y), NumericError);
      continue;
    }
    EXPECT_EQ(concordance_index(risk, y), oracle::brute_cindex(risk, y));
  }
}

TEST(CIndex, PerfectTiedAndComplement) {
  std::vector<SurvivalLabel> y{{1, true}, {2, true}, {3, true}, {4, true}};
  EXPECT_EQ(concordance_index(std::vector<double>{4, 3, 2, 1}, y), 1.0);
  EXPECT_EQ(concordance_index(std::vector<double>{1, 1, 1, 1}, y), 0.5);
  Rng rng(43);
  const auto z = random_labels(rng, 40, 0.3);
  std::vector<double> r(40), neg(40);
  for (int i = 0; i < 40; ++i) neg[i] = -(r[i] = rng.normal());
  EXPECT_NEAR(concordance_index(r, z) + concordance_index(neg, z), 1.0, 1e-15);
}

TEST(KaplanMeier, HandProductLimit) {
  const KMCurve a = kaplan_meier(std::vector<SurvivalLabel>{{1, true}, {2, true}});
  EXPECT_EQ(a.survival, (std::vector<double>{0.5, 0.0}));
  const KMCurve b = kaplan_meier(std::vector<SurvivalLabel>{{1, true}, {2, false}, {3, true}});
  EXPECT_NEAR(b.survival[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(b.survival_at(2.5), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(b.at_risk[2], 1);
  EXPECT_EQ(b.survival_at(3.0), 0.0);
  EXPECT_EQ(b.survival_at(0.5), 1.0);
  const KMCurve c = kaplan_meier(std::vector<SurvivalLabel>{{1, false}, {5, false}});
  for (double s : c.survival) EXPECT_EQ(s, 1.0);
}

TEST(KaplanMeier, DuplicatedCohortSameCurve) {
  Rng rng(44);
  auto y = random_labels(rng, 30, 0.3);
  const KMCurve one = kaplan_meier(y);
  auto twice = y;
  twice.insert(twice.end(), y.begin(), y.end());
  const KMCurve two = kaplan_meier(twice);
  ASSERT_EQ(one.times, two.times);
  for (std::size_t i = 0; i < one.survival.size(); ++i) EXPECT_NEAR(one.survival[i], two.survival[i], 1e-15);
  for (std::size_t i = 1; i < one.survival.size(); ++i) EXPECT_LE(one.survival[i], one.survival[i - 1]);
}

TEST(LogRank, IdenticalGroupsAndSeparatedGroups) {
  const std::vector<SurvivalLabel> g{{1, true}, {2, false}, {3, true}};
  const LogRankResult same = log_rank_test(g, g);
  EXPECT_EQ(same.statistic, 0.0);
  EXPECT_EQ(same.p, 1.0);

  const std::vector<SurvivalLabel> a{{1, true}, {2, true}, {3, true}}, b{{10, true}, {11, true}, {12, true}};
  const LogRankResult r = log_rank_test(a, b);
  // O - E for group A: (1 - 3/6) + (1 - 2/5) + (1 - 1/4) = 1.85;
  // V = 9/36 + 6/25 + 3/16.
  const double var = 9.0 / 36 + 6.0 / 25 + 3.0 / 16;
  EXPECT_NEAR(r.statistic, 1.85 * 1.85 / var, 1e-12);
  EXPECT_NEAR(r.statistic, oracle::logrank_statistic(a, b), 1e-12);
  EXPECT_LT(r.p, 0.05);
  EXPECT_NEAR(log_rank_test(b, a).statistic, r.statistic, 1e-12);
}

TEST(LogRank, RandomGroupsMatchTabulation) {
  Rng rng(45);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_labels(rng, 3 + static_cast<int>(rng.below(20)), 0.3, true);
    const auto b = random_labels(rng, 3 + static_cast<int>(rng.below(20)), 0.3, true);
    const LogRankResult r = log_rank_test(a, b);
    if (r.statistic == 0.0 && r.p == 1.0) continue;
    EXPECT_NEAR(r.statistic, oracle::logrank_statistic(a, b), 1e-10 * std::max(1.0, r.statistic));
  }
  EXPECT_THROW(log_rank_test(std::vector<SurvivalLabel>{{1, false}}, std::vector<SurvivalLabel>{{2, false}}),
               NumericError);
}

TEST(ChiSquare, TailMatchesIntegration) {
  EXPECT_EQ(chi2_sf(0.0), 1.0);
  EXPECT_NEAR(chi2_sf(3.841), 0.05, 1e-3);
  for (double x : {0.01, 0.5, 1.0, 2.5, 3.841, 6.6, 10.0, 20.0, 35.0}) {
    const double want = oracle::chi2_sf_df1(x);
    EXPECT_NEAR(chi2_sf(x), want, 1e-8 * want) << "x=" << x;
  }
  double prev = 1.0;
  for (double x = 0.1; x < 30; x += 0.7) {
    EXPECT_LT(chi2_sf(x), prev);
    prev = chi2_sf(x);
  }
  EXPECT_THROW(chi2_sf(-1.0), NumericError);
}

TEST(Cox, BinaryCovariateGridSearch) {
  Eigen::MatrixXd x(4, 1);
  x << 1, 1, 0, 0;
  const std::vector<SurvivalLabel> y{{1, true}, {2, true}, {3, true}, {4, true}};
  const CoxModel m = cox_fit(x, y);
  // Perfect ordering: the likelihood keeps increasing with gamma, flagged as separation.
  EXPECT_FALSE(m.converged);

  // Overlapping groups give a finite optimum.
  const std::vector<SurvivalLabel> y2{{1, true}, {3, true}, {2, true}, {4, true}};
  const CoxModel m2 = cox_fit(x, y2);
  ASSERT_TRUE(m2.converged);
  const double grid = oracle::cox_grid_max(x, y2, 10.0);
  EXPECT_NEAR(m2.loglik, grid, 1e-6);
  EXPECT_NEAR(oracle::cox_loglik(x, y2, Eigen::VectorXd::Constant(1, m2.gamma[0])), m2.loglik, 1e-10);
}

TEST(Cox, RandomDatasetsAgainstGridOracle) {
  Rng rng(46);
  int fitted = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int p = 1 + static_cast<int>(rng.below(3));
    const int n = 10 + static_cast<int>(rng.below(31));
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0.0, 2.0);
    std::vector<SurvivalLabel> y;
    for (int i = 0; i < n; ++i) y.push_back({rng.exponential(std::exp(0.4 * x(i, 0))), rng.uniform() > 0.25});
    const CoxModel m = cox_fit(x, y);
    if (!m.converged) continue;
    ++fitted;
    EXPECT_GE(m.loglik, oracle::cox_grid_max(x, y, 4.0) - 1e-4);
    for (double g : m.gradient) EXPECT_LT(std::abs(g), 1e-8);
    EXPECT_GE(m.loglik, m.loglik_null);
  }
  EXPECT_GE(fitted, 45);
}

TEST(Cox, Errors) {
  const std::vector<SurvivalLabel> y{{1, true}, {2, true}, {3, true}};
  EXPECT_THROW(cox_fit(Eigen::MatrixXd(3, 0), y), DataError);
  EXPECT_THROW(cox_fit(Eigen::MatrixXd::Ones(3, 3), y), DataError);
  Eigen::MatrixXd x(3, 2);
  x << 1, 5, 2, 5, 3, 5;
  try {
    cox_fit(x, y, {"a", "flat"});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("flat"), std::string::npos);
  }
}

TEST(Cox, PermutedResponsesGiveSmallZ) {
  Rng rng(47);
  double mean_abs_z = 0.0;
  const int reps = 40;
  for (int r = 0; r < reps; ++r) {
    Eigen::MatrixXd x(60, 1);
    std::vector<SurvivalLabel> y;
    for (int i = 0; i < 60; ++i) {
      x(i, 0) = rng.normal();
      y.push_back({rng.exponential(1.0), true});
    }
    mean_abs_z += std::abs(cox_fit(x, y).z(0)) / reps;
  }
  // E|Z| = sqrt(2/pi) ~ 0.8 under the null.
  EXPECT_LT(mean_abs_z, 1.2);
}

}  // namespace
