// SPDX-License-Identifier: Apache-2.0
//
// Survival statistics: discrete-time hazard likelihood, Harrell's C-index,
// Kaplan-Meier, the two-group log-rank test and a Breslow Cox fit.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ipgphormer/autodiff.hpp"
#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"

namespace ipgphormer {

/// Interior edges of T time intervals (0, e_0], (e_0, e_1], ..., (e_{T-2}, inf).
struct TimeBins {
  std::vector<double> edges;

  int count() const { return static_cast<int>(edges.size()) + 1; }

  int bin_of(double time) const {
    if (!std::isfinite(time)) throw NumericError("time bin lookup: time is not finite");
    return static_cast<int>(std::lower_bound(edges.begin(), edges.end(), time) - edges.begin());
  }
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Negative log-likelihood of one label under discrete hazards
/// h_t = sigmoid(risk + offsets[t]). Uses -log h = softplus(-z), -log(1-h) = softplus(z).
inline double nll_survival_loss(double slide_risk, std::span<const double> offsets,
                                const SurvivalLabel& label, const TimeBins& bins) {
  if (static_cast<int>(offsets.size()) != bins.count()) {
    throw NumericError("nll_survival_loss: offsets and bins disagree on T");
  }
  const int k = bins.bin_of(label.time);
  double loss = 0.0;
  for (int t = 0; t < k; ++t) loss += softplus(slide_risk + offsets[t]);
  const double zk = slide_risk + offsets[k];
  loss += label.event ? softplus(-zk) : softplus(zk);
  return loss;
}

/// Differentiable version; `slide_risk` is 1x1 and `offsets` is 1xT.
inline ad::Var nll_survival_loss(ad::Var slide_risk, ad::Var offsets, const SurvivalLabel& label,
                                 const TimeBins& bins) {
  const int T = bins.count();
  if (offsets.rows() != 1 || offsets.cols() != T || slide_risk.rows() != 1 || slide_risk.cols() != 1) {
    throw NumericError("nll_survival_loss: expected 1x1 risk and 1xT offsets");
  }
  ad::Tape& tape = *slide_risk.tape;
  const int k = bins.bin_of(label.time);
  ad::Matrix survive_mask = ad::Matrix::Zero(1, T);
  ad::Matrix event_mask = ad::Matrix::Zero(1, T);
  for (int t = 0; t < k; ++t) survive_mask(0, t) = 1.0;
  (label.event ? event_mask : survive_mask)(0, k) = 1.0;
  ad::Var z = ad::add(ad::matmul(slide_risk, tape.constant(ad::Matrix::Ones(1, T))), offsets);
  ad::Var survive = ad::sum(ad::multiply(ad::softplus(z), tape.constant(survive_mask)));
  if (!label.event) return survive;
  ad::Var event = ad::sum(ad::multiply(ad::softplus(ad::scale(z, -1.0)), tape.constant(event_mask)));
  return ad::add(survive, event);
}

/// Harrell's C. Pair (i, j) is comparable when t_i < t_j and subject i had the event;
/// it is concordant when risk_i > risk_j and counts one half on tied risks.
/// Runs in O(n log n) with a Fenwick tree over risk ranks.
inline double concordance_index(std::span<const double> risks, std::span<const SurvivalLabel> labels) {
  const std::size_t n = risks.size();
  if (labels.size() != n) throw NumericError("concordance_index: risks and labels differ in length");
  std::vector<double> sorted_risk(risks.begin(), risks.end());
  std::sort(sorted_risk.begin(), sorted_risk.end());
  sorted_risk.erase(std::unique(sorted_risk.begin(), sorted_risk.end()), sorted_risk.end());
  const std::size_t m = sorted_risk.size();
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risk.begin(), sorted_risk.end(), r) -
                                    sorted_risk.begin()) + 1;
  };
  std::vector<std::int64_t> tree(m + 1, 0);
  auto add = [&](std::size_t i) {
    for (; i <= m; i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t i) {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return labels[a].time > labels[b].time; });
  std::int64_t twice_concordant = 0, comparable = 0, inserted = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && labels[order[j]].time == labels[order[i]].time) ++j;
    for (std::size_t g = i; g < j; ++g) {
      const std::size_t s = order[g];
      if (!labels[s].event) continue;
      const std::size_t r = rank_of(risks[s]);
      const std::int64_t less = prefix(r - 1);
      const std::int64_t equal = prefix(r) - less;
      twice_concordant += 2 * less + equal;
      comparable += inserted;
    }
    for (std::size_t g = i; g < j; ++g) {
      add(rank_of(risks[order[g]]));
      ++inserted;
    }
    i = j;
  }
  if (comparable == 0) throw NumericError("concordance_index: no comparable pairs");
  return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(comparable));
}

struct KMCurve {
  std::vector<double> times;  // distinct observed times, ascending
  std::vector<double> survival;
  std::vector<int> at_risk;
  std::vector<int> events;

  double survival_at(double t) const {
    double s = 1.0;
    for (std::size_t i = 0; i < times.size() && times[i] <= t; ++i) s = survival[i];
    return s;
  }
};

/// Product-limit estimator; a subject censored at t is still at risk at t.
inline KMCurve kaplan_meier(std::span<const SurvivalLabel> labels) {
  if (labels.empty()) throw NumericError("kaplan_meier: no subjects");
  std::vector<SurvivalLabel> v(labels.begin(), labels.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
  KMCurve km;
  int at_risk = static_cast<int>(v.size());
  double s = 1.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    int d = 0;
    while (j < v.size() && v[j].time == v[i].time) {
      d += v[j].event ? 1 : 0;
      ++j;
    }
    s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
    km.times.push_back(v[i].time);
    km.survival.push_back(s);
    km.at_risk.push_back(at_risk);
    km.events.push_back(d);
    at_risk -= static_cast<int>(j - i);
    i = j;
  }
  return km;
}

/// Regularized upper incomplete gamma Q(a, x): series for x < a + 1, continued fraction otherwise.
inline double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw NumericError("gamma_q: requires a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
  constexpr double kTol = 1e-16;
  if (x < a + 1.0) {
    double ap = a, term = 1.0 / a, total = term;
    for (int n = 0; n < 10000; ++n) {
      ap += 1.0;
      term *= x / ap;
      total += term;
      if (std::abs(term) < std::abs(total) * kTol) break;
    }
    return 1.0 - total * std::exp(log_prefactor);
  }
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kTol) break;
  }
  return std::exp(log_prefactor) * h;
}

/// Upper tail of the chi-square distribution.
inline double chi2_sf(double x, int df = 1) {
  if (x < 0.0 || std::isnan(x)) throw NumericError("chi2_sf: x must be non-negative");
  if (df < 1) throw NumericError("chi2_sf: df must be positive");
  return gamma_q(0.5 * df, 0.5 * x);
}

struct LogRankResult {
  double statistic = 0.0;
  double p = 1.0;
};

inline LogRankResult log_rank_test(std::span<const SurvivalLabel> group_a,
                                   std::span<const SurvivalLabel> group_b) {
  if (group_a.empty() || group_b.empty()) throw NumericError("log_rank_test: empty group");
  struct Obs {
    double time;
    bool event;
    bool in_a;
  };
  std::vector<Obs> all;
  for (const auto& l : group_a) all.push_back({l.time, l.event, true});
  for (const auto& l : group_b) all.push_back({l.time, l.event, false});
  std::sort(all.begin(), all.end(), [](const Obs& x, const Obs& y) { return x.time < y.time; });
  double n_a = static_cast<double>(group_a.size());
  double n_b = static_cast<double>(group_b.size());
  double o_minus_e = 0.0, var = 0.0;
  int total_events = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    double d_a = 0, d_b = 0, c_a = 0, c_b = 0;
    while (j < all.size() && all[j].time == all[i].time) {
      (all[j].in_a ? c_a : c_b) += 1.0;
      if (all[j].event) (all[j].in_a ? d_a : d_b) += 1.0;
      ++j;
    }
    const double d = d_a + d_b;
    const double n = n_a + n_b;
    if (d > 0) {
      total_events += static_cast<int>(d);
      o_minus_e += d_a - d * n_a / n;
      if (n > 1) var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
    }
    n_a -= c_a;
    n_b -= c_b;
    i = j;
  }
  if (total_events == 0) throw NumericError("log_rank_test: no events in either group");
  if (var <= 0.0) return {0.0, 1.0};
  const double stat = o_minus_e * o_minus_e / var;
  return {stat, chi2_sf(stat, 1)};
}

struct CoxModel {
  std::vector<double> gamma;
  std::vector<double> se;
  double loglik = 0.0;
  double loglik_null = 0.0;
  int iters = 0;
  bool converged = false;
  std::vector<double> gradient;  // d loglik / d gamma at the returned solution

  double z(std::size_t j) const { return se[j] > 0.0 ? gamma[j] / se[j] : 0.0; }
  double p_value(std::size_t j) const { return chi2_sf(z(j) * z(j), 1); }
};

namespace detail {

struct CoxDerivs {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;
};

/// Breslow partial likelihood with derivatives. `order` sorts subjects by descending time.
inline CoxDerivs cox_derivs(const Eigen::MatrixXd& x, std::span<const SurvivalLabel> y,
                            const std::vector<std::size_t>& order, const Eigen::VectorXd& beta,
                            bool need_derivs = true) {
  const Eigen::Index p = x.cols();
  const Eigen::VectorXd eta = x * beta;
  const double shift = eta.maxCoeff();
  CoxDerivs out;
  out.grad = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
  std::size_t i = 0;
  const std::size_t n = order.size();
  while (i < n) {
    std::size_t j = i;
    while (j < n && y[order[j]].time == y[order[i]].time) {
      const std::size_t s = order[j];
      const double w = std::exp(eta(static_cast<Eigen::Index>(s)) - shift);
      const auto xs = x.row(static_cast<Eigen::Index>(s)).transpose();
      s0 += w;
      if (need_derivs) {
        s1 += w * xs;
        s2.noalias() += w * xs * xs.transpose();
      }
      ++j;
    }
    for (std::size_t g = i; g < j; ++g) {
      const std::size_t s = order[g];
      if (!y[s].event) continue;
      out.loglik += eta(static_cast<Eigen::Index>(s)) - shift - std::log(s0);
      if (need_derivs) {
        const Eigen::VectorXd mean = s1 / s0;
        out.grad += x.row(static_cast<Eigen::Index>(s)).transpose() - mean;
        out.info += s2 / s0 - mean * mean.transpose();
      }
    }
    i = j;
  }
  return out;
}

}  // namespace detail

/// Breslow partial log-likelihood at `gamma` (original covariate units).
inline double cox_partial_loglik(const Eigen::MatrixXd& x, std::span<const SurvivalLabel> y,
                                 const Eigen::VectorXd& gamma) {
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return y[a].time > y[b].time; });
  return detail::cox_derivs(x, y, order, gamma, false).loglik;
}

struct CoxOptions {
  int max_iter = 100;
  double grad_tol = 1e-10;
  double separation_bound = 50.0;
  // Separation is also flagged when the smallest information eigenvalue falls
  // below this fraction of the mean eigenvalue at gamma = 0.
  double information_floor = 1e-6;
};

/// Newton-Raphson with step-halving on column-standardized covariates; the
/// returned coefficients and standard errors are in the original units.
inline CoxModel cox_fit(const Eigen::MatrixXd& covariates, std::span<const SurvivalLabel> labels,
                        const std::vector<std::string>& names = {}, const CoxOptions& opt = {}) {
  const Eigen::Index n = covariates.rows();
  const Eigen::Index p = covariates.cols();
  if (p == 0) throw DataError("cox_fit: no covariates");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw DataError("cox_fit: row/label mismatch");
  if (n <= p) throw DataError("cox_fit: need more subjects than covariates");
  if (!covariates.allFinite()) throw DataError("cox_fit: non-finite covariate");
  Eigen::VectorXd mu = covariates.colwise().mean().transpose();
  Eigen::VectorXd sd(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    sd(j) = std::sqrt((covariates.col(j).array() - mu(j)).square().sum() / static_cast<double>(n - 1));
    if (!(sd(j) > 0.0)) {
      const std::string name = j < static_cast<Eigen::Index>(names.size()) ? names[j] : "#" + std::to_string(j);
      throw DataError("cox_fit: covariate '" + name + "' has zero variance");
    }
  }
  const Eigen::MatrixXd z = (covariates.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array();
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels[a].time > labels[b].time; });

  CoxModel model;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  detail::CoxDerivs cur = detail::cox_derivs(z, labels, order, beta);
  model.loglik_null = cur.loglik;
  const double null_scale = cur.info.trace() / static_cast<double>(p);
  auto small_grad = [&](const Eigen::VectorXd& g) {
    return g.cwiseAbs().maxCoeff() < opt.grad_tol &&
           (g.array() * sd.array()).abs().maxCoeff() < opt.grad_tol;
  };
  bool separated = false;
  int it = 0;
  for (; it < opt.max_iter && !small_grad(cur.grad); ++it) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.info);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
      separated = true;
      break;
    }
    Eigen::VectorXd step = ldlt.solve(cur.grad);
    detail::CoxDerivs next;
    Eigen::VectorXd cand;
    bool accepted = false;
    for (int halve = 0; halve < 40; ++halve) {
      cand = beta + step;
      next = detail::cox_derivs(z, labels, order, cand);
      if (next.loglik >= cur.loglik - 1e-12 * std::abs(cur.loglik)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const bool stalled = (cand - beta).cwiseAbs().maxCoeff() == 0.0;
    beta = cand;
    cur = std::move(next);
    if (beta.cwiseAbs().maxCoeff() > opt.separation_bound) {
      separated = true;
      ++it;
      break;
    }
    if (stalled) break;
  }
  model.iters = it;
  if (!separated) {
    const double lo = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(cur.info, Eigen::EigenvaluesOnly).eigenvalues()(0);
    separated = !(lo > opt.information_floor * null_scale);
  }
  model.converged = !separated && small_grad(cur.grad);
  model.loglik = cur.loglik;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.info);
  if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all()) {
    cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  }
  for (Eigen::Index j = 0; j < p; ++j) {
    model.gamma.push_back(beta(j) / sd(j));
    model.se.push_back(std::sqrt(std::max(cov(j, j), 0.0)) / sd(j));
    model.gradient.push_back(cur.grad(j) * sd(j));
  }
  return model;
}

}  // namespace ipgphormer
