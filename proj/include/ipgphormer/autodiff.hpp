// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape is an append-only list of nodes. Every primitive reads its inputs
// from the tape, appends one node holding the forward value, and registers a
// closure that maps the node's upstream adjoint onto its inputs. Creation
// order is a topological order, so backward() walks the node list in reverse
// and visits each node exactly once.
//
// Gradients accumulate: calling backward() twice without zero_grad() adds the
// second pass's gradients on top of the first.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "ipgphormer/error.hpp"

namespace ipgphormer::ad {

using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Leaf that receives a gradient.
  Var parameter(Matrix value) { return push(std::move(value), true, nullptr); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends a node. `backward` is only kept when the node depends on a parameter.
  Var push(Matrix value, bool requires_grad, Backward backward) {
    if (!value.allFinite()) {
      throw NumericError("autodiff: non-finite value produced at node " +
                         std::to_string(nodes_.size()));
    }
    Node node;
    node.grad = Matrix::Zero(value.rows(), value.cols());
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
  }

  void backward(Var loss) {
    if (loss.tape != this) throw NumericError("backward: variable belongs to another tape");
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw NumericError("backward: loss must be a 1x1 scalar, got " + std::to_string(lv.rows()) +
                         "x" + std::to_string(lv.cols()));
    }
    adjoint_.assign(loss.id + 1, Matrix());
    adjoint_[loss.id] = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || adjoint_[i].size() == 0) continue;
      if (node.backward) node.backward(*this, adjoint_[i]);
      node.grad += adjoint_[i];
    }
    adjoint_.clear();
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.setZero();
  }

  /// Adds `g` to the adjoint of node `id`. Only called from backward closures.
  void accumulate(std::size_t id, const Matrix& g) {
    if (!nodes_[id].requires_grad) return;
    Matrix& a = adjoint_[id];
    if (a.size() == 0) {
      a = g;
    } else {
      a += g;
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoint_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw NumericError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

inline void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw NumericError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
}

inline bool any_grad(const Tape& t, std::initializer_list<std::size_t> ids) {
  for (auto id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

/// Sequential sum in index order; used wherever bit-exact reproducibility of a reduction matters.
inline double ordered_sum(const Matrix& m) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += m(i, j);
  return s;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  detail::require_shape(a.cols() == b.rows(), "matmul", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), detail::any_grad(t, {ia, ib}),
                [ia, ib](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                  if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(a.value().transpose(), t.requires_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), detail::any_grad(t, {ia, ib}),
                [ia, ib](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, g);
                });
}

inline Var subtract(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "subtract");
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "subtract", a.value(),
                        b.value());
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), detail::any_grad(t, {ia, ib}),
                [ia, ib](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, -g);
                });
}

/// Elementwise (Hadamard) product.
inline Var multiply(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "multiply");
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "multiply", a.value(),
                        b.value());
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value().cwiseProduct(b.value()), detail::any_grad(t, {ia, ib}),
                [ia, ib](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(a.value() * c, t.requires_grad(ia),
                [ia, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * c); });
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push((a.value().array() + c).matrix(), t.requires_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

/// Multiplies every entry of `a` by the 1x1 variable `s`.
inline Var mul_scalar(Var a, Var s) {
  Tape& t = detail::same_tape(a, s, "mul_scalar");
  if (s.rows() != 1 || s.cols() != 1) {
    throw NumericError("mul_scalar: scalar operand must be 1x1");
  }
  const std::size_t ia = a.id, is = s.id;
  return t.push(a.value() * s.scalar(), detail::any_grad(t, {ia, is}),
                [ia, is](Tape& tp, const Matrix& g) {
                  const double sv = tp.value(is)(0, 0);
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * sv);
                  if (tp.requires_grad(is)) {
                    tp.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(tp.value(ia)).sum()));
                  }
                });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_cols: no operands");
  Tape& t = *parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw NumericError("concat_cols: operands live on different tapes");
    detail::require_shape(p.rows() == rows, "concat_cols", parts[0].value(), p.value());
    cols += p.cols();
    needs = needs || t.requires_grad(p.id);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.cols();
  }
  return t.push(std::move(out), needs, [spans](Tape& tp, const Matrix& g) {
    for (auto [id, o] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(o, tp.value(id).cols()));
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_cols(std::span<const Var>(v));
}

inline Var row_slice(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw NumericError("row_slice: range out of bounds");
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(a.value().middleRows(start, count), t.requires_grad(ia),
                [ia, start, count, r, c](Tape& tp, const Matrix& g) {
                  Matrix full = Matrix::Zero(r, c);
                  full.middleRows(start, count) = g;
                  tp.accumulate(ia, full);
                });
}

/// out.row(i) = a.row(index[i]); rows may repeat.
inline Var gather_rows(Var a, std::vector<int> index) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.rows()) throw NumericError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = av.row(index[i]);
  }
  const std::size_t ia = a.id;
  const Eigen::Index r = av.rows();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, r, index = std::move(index)](Tape& tp, const Matrix& g) {
                  Matrix full = Matrix::Zero(r, g.cols());
                  for (std::size_t i = 0; i < index.size(); ++i)
                    full.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                  tp.accumulate(ia, full);
                });
}

/// relu'(0) is taken as 0.
inline Var relu(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(a.value().cwiseMax(0.0), t.requires_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (tp.value(ia).array() > 0.0).select(g, 0.0).matrix());
  });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const auto& x = a.value().array();
  return t.push((x > 0.0).select(x, slope * x).matrix(), t.requires_grad(ia),
                [ia, slope](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, (tp.value(ia).array() > 0.0).select(g, slope * g).matrix());
                });
}

inline Var exp(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const std::size_t io = t.size();
  return t.push(a.value().array().exp().matrix(), t.requires_grad(ia), [ia, io](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(io)));
  });
}

inline Var log(Var a) {
  Tape& t = *a.tape;
  if ((a.value().array() <= 0.0).any()) throw NumericError("log: argument must be positive");
  const std::size_t ia = a.id;
  return t.push(a.value().array().log().matrix(), t.requires_grad(ia),
                [ia](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g.cwiseQuotient(tp.value(ia)));
                });
}

inline Matrix sigmoid_values(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const std::size_t io = t.size();
  return t.push(sigmoid_values(a.value()), t.requires_grad(ia), [ia, io](Tape& tp, const Matrix& g) {
    const auto& s = tp.value(io).array();
    tp.accumulate(ia, (g.array() * s * (1.0 - s)).matrix());
  });
}

/// log(1 + exp(x)), evaluated without overflow.
inline Var softplus(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  Matrix out = a.value().unaryExpr(
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
  return t.push(std::move(out), t.requires_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(sigmoid_values(tp.value(ia))));
  });
}

inline Var reciprocal(Var a) {
  Tape& t = *a.tape;
  if ((a.value().array() == 0.0).any()) throw NumericError("reciprocal: division by zero");
  const std::size_t ia = a.id;
  return t.push(a.value().cwiseInverse(), t.requires_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (-g.array() / tp.value(ia).array().square()).matrix());
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(Matrix::Constant(1, 1, detail::ordered_sum(a.value())), t.requires_grad(ia),
                [ia, r, c](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
                });
}

/// Arithmetic mean of all entries: ordered sum divided by the count.
inline Var mean(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  if (r * c == 0) throw NumericError("mean: empty operand");
  const double n = static_cast<double>(r * c);
  return t.push(Matrix::Constant(1, 1, detail::ordered_sum(a.value()) / n), t.requires_grad(ia),
                [ia, r, c, n](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0) / n));
                });
}

/// Softmax of a column of scores within groups sharing a segment id.
inline Var segment_softmax(Var scores, std::vector<int> segment, int n_segments) {
  Tape& t = *scores.tape;
  const Matrix& s = scores.value();
  if (s.cols() != 1 || s.rows() != static_cast<Eigen::Index>(segment.size())) {
    throw NumericError("segment_softmax: scores must be a column matching the segment ids");
  }
  std::vector<double> seg_max(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < segment.size(); ++e) {
    if (segment[e] < 0 || segment[e] >= n_segments) throw NumericError("segment_softmax: bad id");
    seg_max[segment[e]] = std::max(seg_max[segment[e]], s(static_cast<Eigen::Index>(e), 0));
  }
  Matrix out(s.rows(), 1);
  std::vector<double> seg_sum(n_segments, 0.0);
  for (std::size_t e = 0; e < segment.size(); ++e) {
    const double v = std::exp(s(static_cast<Eigen::Index>(e), 0) - seg_max[segment[e]]);
    out(static_cast<Eigen::Index>(e), 0) = v;
    seg_sum[segment[e]] += v;
  }
  for (std::size_t e = 0; e < segment.size(); ++e) out(static_cast<Eigen::Index>(e), 0) /= seg_sum[segment[e]];
  const std::size_t is = scores.id;
  const std::size_t io = t.size();
  return t.push(std::move(out), t.requires_grad(is),
                [is, io, n_segments, segment = std::move(segment)](Tape& tp, const Matrix& g) {
                  const Matrix& a = tp.value(io);
                  std::vector<double> dot(n_segments, 0.0);
                  for (std::size_t e = 0; e < segment.size(); ++e) {
                    const auto ei = static_cast<Eigen::Index>(e);
                    dot[segment[e]] += a(ei, 0) * g(ei, 0);
                  }
                  Matrix ds(a.rows(), 1);
                  for (std::size_t e = 0; e < segment.size(); ++e) {
                    const auto ei = static_cast<Eigen::Index>(e);
                    ds(ei, 0) = a(ei, 0) * (g(ei, 0) - dot[segment[e]]);
                  }
                  tp.accumulate(is, ds);
                });
}

/// out.row(k) = sum of a.row(e) over rows e with segment[e] == k.
inline Var segment_sum(Var a, std::vector<int> segment, int n_segments) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  if (av.rows() != static_cast<Eigen::Index>(segment.size())) {
    throw NumericError("segment_sum: row count must match segment ids");
  }
  Matrix out = Matrix::Zero(n_segments, av.cols());
  for (std::size_t e = 0; e < segment.size(); ++e) {
    if (segment[e] < 0 || segment[e] >= n_segments) throw NumericError("segment_sum: bad id");
    out.row(segment[e]) += av.row(static_cast<Eigen::Index>(e));
  }
  const std::size_t ia = a.id;
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, segment = std::move(segment)](Tape& tp, const Matrix& g) {
                  Matrix d(static_cast<Eigen::Index>(segment.size()), g.cols());
                  for (std::size_t e = 0; e < segment.size(); ++e)
                    d.row(static_cast<Eigen::Index>(e)) = g.row(segment[e]);
                  tp.accumulate(ia, d);
                });
}

/// Sparse (constant) times dense variable.
inline Var spmm(const SparseMatrix& s, Var x) {
  Tape& t = *x.tape;
  if (s.cols() != x.rows()) {
    throw NumericError("spmm: sparse operand has " + std::to_string(s.cols()) +
                       " columns but dense operand has " + std::to_string(x.rows()) + " rows");
  }
  const std::size_t ix = x.id;
  Matrix out = s * x.value();
  if (!t.requires_grad(ix)) return t.push(std::move(out), false, nullptr);
  SparseMatrix st = s.transpose();
  return t.push(std::move(out), true, [ix, st = std::move(st)](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, st * g);
  });
}

/// Adds the 1 x cols row vector `r` to every row of `a`.
inline Var add_row(Var a, Var r) {
  Tape& t = detail::same_tape(a, r, "add_row");
  detail::require_shape(r.rows() == 1 && r.cols() == a.cols(), "add_row", a.value(), r.value());
  const std::size_t ia = a.id, ir = r.id;
  return t.push((a.value().rowwise() + r.value().row(0)).eval(), detail::any_grad(t, {ia, ir}),
                [ia, ir](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g);
                  if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
                });
}

/// Scales row i of `a` by w(i, 0).
inline Var scale_rows(Var a, Var w) {
  Tape& t = detail::same_tape(a, w, "scale_rows");
  detail::require_shape(w.cols() == 1 && w.rows() == a.rows(), "scale_rows", a.value(), w.value());
  const std::size_t ia = a.id, iw = w.id;
  return t.push((w.value().col(0).asDiagonal() * a.value()).eval(), detail::any_grad(t, {ia, iw}),
                [ia, iw](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, tp.value(iw).col(0).asDiagonal() * g);
                  if (tp.requires_grad(iw)) {
                    tp.accumulate(iw, g.cwiseProduct(tp.value(ia)).rowwise().sum());
                  }
                });
}

/// Row-wise standardization without affine parameters: (x - mean) / sqrt(var + eps).
inline Var layer_norm(Var a, double eps = 1e-5) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  if (n == 0) throw NumericError("layer_norm: zero-width input");
  Eigen::VectorXd inv_std(x.rows());
  Matrix y(x.rows(), n);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  const std::size_t ia = a.id;
  const std::size_t io = t.size();
  return t.push(std::move(y), t.requires_grad(ia),
                [ia, io, inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                  const Matrix& yv = tp.value(io);
                  const double w = static_cast<double>(yv.cols());
                  Matrix d(yv.rows(), yv.cols());
                  for (Eigen::Index i = 0; i < yv.rows(); ++i) {
                    const double gm = g.row(i).sum() / w;
                    const double gy = g.row(i).dot(yv.row(i)) / w;
                    d.row(i) = inv_std(i) * (g.row(i).array() - gm - yv.row(i).array() * gy);
                  }
                  tp.accumulate(ia, d);
                });
}

/// Central-difference gradient check. `f` builds a scalar on the given tape from the
/// supplied input variable. Returns the largest per-coordinate relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double step = 1e-5,
                         double floor = 1e-6) {
  Matrix analytic;
  {
    Tape tape;
    Var xv = tape.parameter(x);
    tape.backward(f(tape, xv));
    analytic = xv.grad();
  }
  auto eval = [&](const Matrix& at) {
    Tape tape;
    Var xv = tape.constant(at);
    return f(tape, xv).scalar();
  };
  double worst = 0.0;
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      probe(i, j) = x(i, j) + step;
      const double up = eval(probe);
      probe(i, j) = x(i, j) - step;
      const double down = eval(probe);
      probe(i, j) = x(i, j);
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic(i, j);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ipgphormer::ad
