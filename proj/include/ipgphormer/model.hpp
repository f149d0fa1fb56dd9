// SPDX-License-Identifier: Apache-2.0
//
// Multi-scale graph transformer for slide-level survival.
//
//   LOW stream:  X_L --TIE (GAT x L)--> H_L --propagate (S steps)--> Z_L
//   HIGH stream: [onehot(type), X_H] --HIE (GAT x L)--> H_H --propagate--> Z_H
//   N_blk blocks: LOW attends with a fused kernel that adds child-averaged
//   HIGH similarities to its own; HIGH self-attends. Both streams then go
//   through residual + layer norm + feed-forward.
//   Head: linear map of each LOW embedding to a patch risk; slide risk is
//   the mean of patch risks.
//
// Weight matrices are stored input-major (fan_in x fan_out) and applied as X W.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipgphormer/autodiff.hpp"
#include "ipgphormer/cohort.hpp"
#include "ipgphormer/error.hpp"
#include "ipgphormer/graph.hpp"
#include "ipgphormer/rng.hpp"

namespace ipgphormer {

using ad::Matrix;
using ad::Var;

struct ModelConfig {
  int d = 768;          // input feature width
  int hidden = 256;     // GAT output and attention width
  int gat_layers = 3;
  int prop_steps = 3;   // S
  int n_blocks = 5;
  int ffn_mult = 2;
  int bins = 4;         // T
  double eps = 1e-6;
  double leaky_slope = 0.2;
  double ln_eps = 1e-5;
  bool tie = true;
  bool hie = true;
  bool block_extras = true;  // residual + layer norm + feed-forward after attention

  int width_low() const { return tie ? hidden : d; }
  int width_high() const { return hie ? hidden : d; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"hidden", c.hidden},
                     {"gat_layers", c.gat_layers},
                     {"prop_steps", c.prop_steps},
                     {"n_blocks", c.n_blocks},
                     {"ffn_mult", c.ffn_mult},
                     {"bins", c.bins},
                     {"eps", c.eps},
                     {"leaky_slope", c.leaky_slope},
                     {"ln_eps", c.ln_eps},
                     {"tie", c.tie},
                     {"hie", c.hie},
                     {"block_extras", c.block_extras}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig def;
  c.d = j.value("d", def.d);
  c.hidden = j.value("hidden", def.hidden);
  c.gat_layers = j.value("gat_layers", def.gat_layers);
  c.prop_steps = j.value("prop_steps", def.prop_steps);
  c.n_blocks = j.value("n_blocks", def.n_blocks);
  c.ffn_mult = j.value("ffn_mult", def.ffn_mult);
  c.bins = j.value("bins", def.bins);
  c.eps = j.value("eps", def.eps);
  c.leaky_slope = j.value("leaky_slope", def.leaky_slope);
  c.ln_eps = j.value("ln_eps", def.ln_eps);
  c.tie = j.value("tie", def.tie);
  c.hie = j.value("hie", def.hie);
  c.block_extras = j.value("block_extras", def.block_extras);
}

/// Ordered, named collection of parameter matrices.
class ParamStore {
 public:
  int add(const std::string& name, Matrix value) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = static_cast<int>(values_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }

  int index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Matrix& operator[](const std::string& name) { return values_[index(name)]; }
  const Matrix& operator[](const std::string& name) const { return values_[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::map<std::string, int> index_;
};

struct Model {
  ModelConfig cfg;
  ParamStore params;
};

inline Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

/// Allocates every parameter for `cfg`; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// beta = 1/(S+1), biases and bin offsets zero.
inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.d < 1 || cfg.hidden < 1 || cfg.gat_layers < 1 || cfg.prop_steps < 0 || cfg.n_blocks < 1 ||
      cfg.bins < 1 || !(cfg.eps > 0.0)) {
    throw UsageError("init_model: invalid model configuration");
  }
  Model m;
  m.cfg = cfg;
  Rng rng = Rng::derive(seed, 0x1417);
  auto& P = m.params;
  const int h = cfg.hidden;
  if (cfg.tie) {
    for (int l = 0; l < cfg.gat_layers; ++l) {
      const int in = l == 0 ? cfg.d : h;
      P.add("tie." + std::to_string(l) + ".weight", uniform_init(in, h, in, rng));
      P.add("tie." + std::to_string(l) + ".att", uniform_init(2 * h, 1, 2 * h, rng));
    }
  }
  if (cfg.hie) {
    for (int l = 0; l < cfg.gat_layers; ++l) {
      const int in = l == 0 ? cfg.d + kNumPatchTypes : h;
      P.add("hie." + std::to_string(l) + ".weight", uniform_init(in, h, in, rng));
      P.add("hie." + std::to_string(l) + ".att", uniform_init(2 * h, 1, 2 * h, rng));
    }
  }
  P.add("prop_low.beta", Matrix::Constant(cfg.prop_steps + 1, 1, 1.0 / (cfg.prop_steps + 1)));
  P.add("prop_high.beta", Matrix::Constant(cfg.prop_steps + 1, 1, 1.0 / (cfg.prop_steps + 1)));
  const int wl = cfg.width_low(), wh = cfg.width_high();
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string pre = "block." + std::to_string(b) + ".";
    const bool last = b + 1 == cfg.n_blocks;
    P.add(pre + "low.q", uniform_init(wl, h, wl, rng));
    P.add(pre + "low.k", uniform_init(wl, h, wl, rng));
    P.add(pre + "low.v", uniform_init(wl, wl, wl, rng));
    P.add(pre + "high.q", uniform_init(wh, h, wh, rng));
    P.add(pre + "high.k", uniform_init(wh, h, wh, rng));
    // The HIGH stream's own update after the last block feeds nothing.
    if (!last) P.add(pre + "high.v", uniform_init(wh, wh, wh, rng));
    if (cfg.block_extras) {
      auto ffn = [&](const std::string& s, int w) {
        const int f = cfg.ffn_mult * w;
        P.add(pre + s + ".ffn1", uniform_init(w, f, w, rng));
        P.add(pre + s + ".ffn1_bias", Matrix::Zero(1, f));
        P.add(pre + s + ".ffn2", uniform_init(f, w, f, rng));
        P.add(pre + s + ".ffn2_bias", Matrix::Zero(1, w));
      };
      ffn("low", wl);
      if (!last) ffn("high", wh);
    }
  }
  P.add("head.weight", uniform_init(wl, 1, wl, rng));
  P.add("bin_offsets", Matrix::Zero(1, cfg.bins));
  return m;
}

/// Parameter leaves of one forward pass, aligned with the ParamStore.
struct Leaves {
  const ParamStore* store = nullptr;
  std::vector<Var> vars;

  Var operator[](const std::string& name) const { return vars[store->index(name)]; }
};

/// Puts every parameter on the tape; as gradient leaves when `trainable`.
inline Leaves make_leaves(ad::Tape& tape, const Model& model, bool trainable) {
  Leaves lv;
  lv.store = &model.params;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    lv.vars.push_back(trainable ? tape.parameter(model.params.value(i))
                                : tape.constant(model.params.value(i)));
  }
  return lv;
}

// ---------------------------------------------------------------------------
// Patch-level transfer

/// One GAT layer. Scores LeakyReLU(a^T [W h_v, W h_u]) are softmax-normalized
/// over the incoming edges of v; the output is ReLU(sum_u alpha_vu W h_u).
/// Edges (dst[e], src[e]) must include self loops so no node is left without input.
/// `weight` is fan_in x d', `att` is 2d' x 1. When `alpha_out` is non-null it
/// receives the per-edge attention column.
inline Var gat_forward(Var h, const std::vector<int>& dst, const std::vector<int>& src, int n_nodes,
                       Var weight, Var att, double slope = 0.2, Var* alpha_out = nullptr) {
  if (h.rows() != n_nodes) throw NumericError("gat_forward: feature rows differ from node count");
  if (h.cols() != weight.rows()) throw NumericError("gat_forward: feature width differs from W");
  const Eigen::Index dp = weight.cols();
  if (att.rows() != 2 * dp || att.cols() != 1) throw NumericError("gat_forward: a must be 2d' x 1");
  Var wh = ad::matmul(h, weight);
  Var s_dst = ad::matmul(wh, ad::row_slice(att, 0, dp));
  Var s_src = ad::matmul(wh, ad::row_slice(att, dp, dp));
  Var e = ad::leaky_relu(ad::add(ad::gather_rows(s_dst, dst), ad::gather_rows(s_src, src)), slope);
  Var alpha = ad::segment_softmax(e, dst, n_nodes);
  if (alpha_out) *alpha_out = alpha;
  Var msg = ad::scale_rows(ad::gather_rows(wh, src), alpha);
  return ad::relu(ad::segment_sum(msg, dst, n_nodes));
}

/// Heterogeneous encoding r_v = [onehot(type_v), x_v].
inline Matrix hie_init(const Matrix& x_high, const std::vector<int>& types) {
  if (static_cast<Eigen::Index>(types.size()) != x_high.rows()) {
    throw NumericError("hie_init: one type per row required");
  }
  Matrix r = Matrix::Zero(x_high.rows(), x_high.cols() + kNumPatchTypes);
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (types[i] < 0 || types[i] >= kNumPatchTypes) {
      throw DataError("hie_init: type id " + std::to_string(types[i]) + " outside [0,4]");
    }
    r(static_cast<Eigen::Index>(i), types[i]) = 1.0;
  }
  r.rightCols(x_high.cols()) = x_high;
  return r;
}

// ---------------------------------------------------------------------------
// Region-level transfer

/// Z = sum_{s=0..S} beta_s A^s H with `beta` an (S+1) x 1 column.
inline Var decoupled_propagate(Var h, const ad::SparseMatrix& adj, Var beta, int steps) {
  if (beta.rows() != steps + 1 || beta.cols() != 1) {
    throw NumericError("decoupled_propagate: beta must be (S+1) x 1");
  }
  Var z = ad::mul_scalar(h, ad::row_slice(beta, 0, 1));
  Var cur = h;
  for (int s = 1; s <= steps; ++s) {
    cur = ad::spmm(adj, cur);
    z = ad::add(z, ad::mul_scalar(cur, ad::row_slice(beta, s, 1)));
  }
  return z;
}

// ---------------------------------------------------------------------------
// Simplified linear attention

/// Kernelized attention from already-activated feature maps:
/// (phi_q (phi_k^T V)) / (phi_q (phi_k^T 1) + eps), row-wise.
inline Var linear_attention(Var phi_q, Var phi_k, Var v, double eps) {
  if (phi_k.rows() != v.rows()) throw NumericError("linear_attention: K and V row counts differ");
  if (phi_q.cols() != phi_k.cols()) throw NumericError("linear_attention: Q and K widths differ");
  ad::Tape& t = *phi_q.tape;
  Var phi_k_t = ad::transpose(phi_k);
  Var kv = ad::matmul(phi_k_t, v);
  Var ksum = ad::matmul(phi_k_t, t.constant(Matrix::Ones(phi_k.rows(), 1)));
  Var num = ad::matmul(phi_q, kv);
  Var den = ad::add_scalar(ad::matmul(phi_q, ksum), eps);
  return ad::scale_rows(num, ad::reciprocal(den));
}

inline Var sla_attention(Var q, Var k, Var v, double eps) {
  return linear_attention(ad::relu(q), ad::relu(k), v, eps);
}

/// Value-only SLA (no tape): relu(Q) P / (relu(Q) y + eps), P = relu(K)^T V, y = relu(K)^T 1.
inline Matrix sla_attention(const Matrix& q, const Matrix& k, const Matrix& v, double eps) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols()) {
    throw NumericError("sla_attention: incompatible shapes");
  }
  const Matrix rq = q.cwiseMax(0.0);
  const Matrix rk = k.cwiseMax(0.0);
  const Matrix p = rk.transpose() * v;
  const Eigen::VectorXd y = rk.colwise().sum().transpose();
  const Eigen::VectorXd den = (rq * y).array() + eps;
  return (rq * p).array().colwise() / den.array();
}

/// LOW-stream attention with cross-scale fusion. The fused similarity is
///   S(v,u) = relu(Q_L,v) relu(K_L,u)^T + mean_{p in C(v), q in C(u)} relu(Q_H,p) relu(K_H,q)^T,
/// which factorizes into the child-mean kernel features, so appending them to the
/// LOW kernel features keeps the whole computation linear in node count.
inline Var fused_attention(Var q_low, Var k_low, Var v_low, Var q_high, Var k_high,
                           const ad::SparseMatrix& child_mean, double eps) {
  Var phi_q_child = ad::spmm(child_mean, ad::relu(q_high));
  Var phi_k_child = ad::spmm(child_mean, ad::relu(k_high));
  Var phi_q = ad::concat_cols({ad::relu(q_low), phi_q_child});
  Var phi_k = ad::concat_cols({ad::relu(k_low), phi_k_child});
  return linear_attention(phi_q, phi_k, v_low, eps);
}

inline Matrix fused_attention(const Matrix& q_low, const Matrix& k_low, const Matrix& v_low,
                              const Matrix& q_high, const Matrix& k_high,
                              const ad::SparseMatrix& child_mean, double eps) {
  ad::Tape t;
  return fused_attention(t.constant(q_low), t.constant(k_low), t.constant(v_low), t.constant(q_high),
                         t.constant(k_high), child_mean, eps)
      .value();
}

// ---------------------------------------------------------------------------
// Transformer block

namespace detail {

inline Var feed_forward(Var z, const Leaves& p, const std::string& pre) {
  Var hid = ad::relu(ad::add_row(ad::matmul(z, p[pre + ".ffn1"]), p[pre + ".ffn1_bias"]));
  return ad::add_row(ad::matmul(hid, p[pre + ".ffn2"]), p[pre + ".ffn2_bias"]);
}

inline Var post_attention(Var z, Var attn, const Leaves& p, const std::string& pre, const ModelConfig& cfg) {
  if (!cfg.block_extras) return attn;
  Var z1 = ad::layer_norm(ad::add(z, attn), cfg.ln_eps);
  return ad::layer_norm(ad::add(z1, feed_forward(z1, p, pre)), cfg.ln_eps);
}

}  // namespace detail

/// One block: fused LOW update and (unless `update_high` is false) HIGH self-update.
inline std::pair<Var, Var> cross_scale_fuse(Var z_low, Var z_high, const MultiScaleGraph& g,
                                            const Leaves& p, int block, const ModelConfig& cfg,
                                            bool update_high = true) {
  const std::string pre = "block." + std::to_string(block) + ".";
  Var q_low = ad::matmul(z_low, p[pre + "low.q"]);
  Var k_low = ad::matmul(z_low, p[pre + "low.k"]);
  Var v_low = ad::matmul(z_low, p[pre + "low.v"]);
  Var q_high = ad::matmul(z_high, p[pre + "high.q"]);
  Var k_high = ad::matmul(z_high, p[pre + "high.k"]);
  Var attn_low = fused_attention(q_low, k_low, v_low, q_high, k_high, g.child_mean, cfg.eps);
  Var out_low = detail::post_attention(z_low, attn_low, p, pre + "low", cfg);
  Var out_high = z_high;
  if (update_high) {
    Var v_high = ad::matmul(z_high, p[pre + "high.v"]);
    Var attn_high = sla_attention(q_high, k_high, v_high, cfg.eps);
    out_high = detail::post_attention(z_high, attn_high, p, pre + "high", cfg);
  }
  return {out_low, out_high};
}

// ---------------------------------------------------------------------------
// Whole slide

struct ForwardResult {
  Var patch_risks;  // n_low x 1
  Var slide_risk;   // 1 x 1, mean of patch_risks
};

inline ForwardResult forward_slide(ad::Tape& tape, const Model& model, const Leaves& p,
                                   const MultiScaleGraph& g, const Matrix& x_low, const Matrix& x_high) {
  const ModelConfig& cfg = model.cfg;
  if (x_low.rows() != g.n_low || x_high.rows() != g.n_high) {
    throw DataError("forward_slide: feature rows do not match graph node counts");
  }
  if (x_low.cols() != cfg.d || x_high.cols() != cfg.d) {
    throw DataError("forward_slide: feature width " + std::to_string(x_low.cols()) +
                    " differs from model d=" + std::to_string(cfg.d));
  }
  Var h_low = tape.constant(x_low);
  if (cfg.tie) {
    for (int l = 0; l < cfg.gat_layers; ++l) {
      const std::string pre = "tie." + std::to_string(l);
      h_low = gat_forward(h_low, g.low_dst, g.low_src, g.n_low, p[pre + ".weight"], p[pre + ".att"],
                          cfg.leaky_slope);
    }
  }
  Var h_high = tape.constant(cfg.hie ? hie_init(x_high, g.types_high) : x_high);
  if (cfg.hie) {
    for (int l = 0; l < cfg.gat_layers; ++l) {
      const std::string pre = "hie." + std::to_string(l);
      h_high = gat_forward(h_high, g.high_dst, g.high_src, g.n_high, p[pre + ".weight"],
                           p[pre + ".att"], cfg.leaky_slope);
    }
  }
  Var z_low = decoupled_propagate(h_low, g.a_low, p["prop_low.beta"], cfg.prop_steps);
  Var z_high = decoupled_propagate(h_high, g.a_high, p["prop_high.beta"], cfg.prop_steps);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    std::tie(z_low, z_high) = cross_scale_fuse(z_low, z_high, g, p, b, cfg, b + 1 < cfg.n_blocks);
  }
  ForwardResult out;
  out.patch_risks = ad::matmul(z_low, p["head.weight"]);
  out.slide_risk = ad::mean(out.patch_risks);
  return out;
}

/// Sequential mean, the same reduction ad::mean uses.
inline double mean_of(const Eigen::MatrixXd& v) {
  return ad::detail::ordered_sum(v) / static_cast<double>(v.size());
}

struct SlidePrediction {
  Eigen::VectorXd patch_risks;
  double slide_risk = 0.0;
};

/// Inference-only forward pass.
inline SlidePrediction predict_slide(const Model& model, const MultiScaleGraph& g, const Matrix& x_low,
                                     const Matrix& x_high) {
  ad::Tape tape;
  const Leaves p = make_leaves(tape, model, false);
  ForwardResult r = forward_slide(tape, model, p, g, x_low, x_high);
  return {r.patch_risks.value().col(0), r.slide_risk.scalar()};
}

}  // namespace ipgphormer
