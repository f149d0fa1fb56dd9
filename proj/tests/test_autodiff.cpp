// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "ipgphormer/autodiff.hpp"

namespace {

using namespace ipgphormer;
using ad::Tape;
using fixtures::random_matrix;

constexpr double kTol = 1e-4;

// Contract every primitive's output to a scalar with a fixed random weighting so
// all output coordinates enter the check.
Var weighted_sum(Tape& t, Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::multiply(y, t.constant(random_matrix(rng, y.rows(), y.cols()))));
}

// Values away from 0 so relu-type kinks are not straddled by the finite difference.
Matrix away_from_zero(Rng& rng, int r, int c) {
  Matrix m = random_matrix(rng, r, c, 0.2, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (rng.uniform() < 0.5) m.data()[i] = -m.data()[i];
  return m;
}

TEST(Autodiff, MatmulBothOperands) {
  Rng rng(1);
  const Matrix b = random_matrix(rng, 4, 2);
  const Matrix a = random_matrix(rng, 3, 4);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var x) { return weighted_sum(t, ad::matmul(x, t.constant(b))); }, a), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var x) { return weighted_sum(t, ad::matmul(t.constant(a), x)); }, b), kTol);
}

TEST(Autodiff, ElementwiseBinary) {
  Rng rng(2);
  const Matrix other = random_matrix(rng, 3, 3);
  const Matrix x = random_matrix(rng, 3, 3);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::add(v, t.constant(other))); }, x), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::subtract(t.constant(other), v)); }, x), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::multiply(v, t.constant(other))); }, x), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::multiply(v, v)); }, x), kTol);
}

TEST(Autodiff, ScalarOps) {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 2, 5);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::scale(v, -2.5)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::add_scalar(v, 0.7)); }, x), kTol);
  const Matrix s = Matrix::Constant(1, 1, 0.8);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::mul_scalar(v, t.constant(s))); }, x), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::mul_scalar(t.constant(x), v)); }, s), kTol);
}

TEST(Autodiff, Structural) {
  Rng rng(4);
  const Matrix x = random_matrix(rng, 5, 3);
  const Matrix y = random_matrix(rng, 5, 2);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::transpose(v)); }, x), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::concat_cols({v, t.constant(y), v})); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::row_slice(v, 1, 3)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::gather_rows(v, {4, 0, 0, 2, 4, 4})); }, x), kTol);
  const Matrix row = random_matrix(rng, 1, 3);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::add_row(t.constant(x), v)); }, row), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::add_row(v, t.constant(row))); }, x), kTol);
}

TEST(Autodiff, Activations) {
  Rng rng(5);
  const Matrix x = away_from_zero(rng, 4, 4);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::relu(v)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::leaky_relu(v, 0.2)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::exp(v)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::sigmoid(v)); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::softplus(v)); }, x), kTol);
  const Matrix pos = random_matrix(rng, 3, 3, 0.3, 2.0);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::log(v)); }, pos), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::reciprocal(v)); }, pos), kTol);
}

TEST(Autodiff, Reductions) {
  Rng rng(6);
  const Matrix x = random_matrix(rng, 4, 3);
  EXPECT_LT(ad::grad_check([](Tape&, Var v) { return ad::sum(v); }, x), kTol);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return ad::mean(ad::multiply(v, t.constant(Matrix::Constant(4, 3, 2.0)))); }, x), kTol);
}

TEST(Autodiff, SegmentOps) {
  Rng rng(7);
  const std::vector<int> seg{0, 0, 1, 2, 2, 2, 1};
  const Matrix scores = random_matrix(rng, 7, 1, -2.0, 2.0);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::segment_softmax(v, seg, 3)); }, scores), kTol);
  const Matrix rows = random_matrix(rng, 7, 3);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::segment_sum(v, seg, 4)); }, rows), kTol);
  const Matrix w = random_matrix(rng, 7, 1);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::scale_rows(v, t.constant(w))); }, rows), kTol);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::scale_rows(t.constant(rows), v)); }, w), kTol);
}

TEST(Autodiff, SparseProduct) {
  Rng rng(8);
  ad::SparseMatrix s(4, 5);
  std::vector<Eigen::Triplet<double>> trip{{0, 1, 0.5}, {1, 1, -1.0}, {2, 4, 2.0}, {3, 0, 0.3}, {3, 3, 0.7}};
  s.setFromTriplets(trip.begin(), trip.end());
  const Matrix x = random_matrix(rng, 5, 3);
  EXPECT_LT(ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::spmm(s, v)); }, x), kTol);
}

TEST(Autodiff, LayerNorm) {
  Rng rng(9);
  const Matrix x = random_matrix(rng, 4, 6, -2.0, 2.0);
  EXPECT_LT(ad::grad_check([](Tape& t, Var v) { return weighted_sum(t, ad::layer_norm(v, 1e-5)); }, x), kTol);
  Tape t;
  const Matrix y = ad::layer_norm(t.constant(x), 1e-5).value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.row(i).array() - y.row(i).mean()).square().mean(), 1.0, 1e-4);
  }
}

TEST(Autodiff, SegmentSoftmaxSumsToOne) {
  Tape t;
  const std::vector<int> seg{2, 0, 2, 0, 2};
  const Matrix s = (Matrix(5, 1) << 1.0, -3.0, 0.5, 10.0, 2.0).finished();
  const Matrix a = ad::segment_softmax(t.constant(s), seg, 3).value();
  EXPECT_NEAR(a(1, 0) + a(3, 0), 1.0, 1e-15);
  EXPECT_NEAR(a(0, 0) + a(2, 0) + a(4, 0), 1.0, 1e-15);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  // f(x) = sum(x*x + 3x)  ->  df/dx = 2x + 3
  Tape t;
  const Matrix x0 = (Matrix(2, 2) << 1, -2, 0.5, 4).finished();
  Var x = t.parameter(x0);
  Var f = ad::sum(ad::add(ad::multiply(x, x), ad::scale(x, 3.0)));
  t.backward(f);
  EXPECT_TRUE(x.grad().isApprox(((2.0 * x0).array() + 3.0).matrix()));
  // A second backward adds, zero_grad clears.
  t.backward(f);
  EXPECT_TRUE(x.grad().isApprox(2.0 * ((2.0 * x0).array() + 3.0).matrix()));
  t.zero_grad();
  EXPECT_EQ(x.grad().norm(), 0.0);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  Tape t;
  Var c = t.constant(Matrix::Ones(2, 2));
  Var p = t.parameter(Matrix::Ones(2, 2));
  t.backward(ad::sum(ad::multiply(c, p)));
  EXPECT_EQ(c.grad().norm(), 0.0);
  EXPECT_EQ(p.grad().sum(), 4.0);
}

TEST(Autodiff, Errors) {
  Tape t;
  Var a = t.parameter(Matrix::Ones(2, 3));
  EXPECT_THROW(ad::matmul(a, a), NumericError);
  EXPECT_THROW(t.backward(a), NumericError);
  EXPECT_THROW(ad::log(t.constant(Matrix::Zero(1, 1))), NumericError);
  EXPECT_THROW(ad::reciprocal(t.constant(Matrix::Zero(1, 1))), NumericError);
  EXPECT_THROW(t.constant(Matrix::Constant(1, 1, std::nan(""))), NumericError);
  Tape other;
  EXPECT_THROW(ad::add(a, other.constant(Matrix::Ones(2, 3))), NumericError);
}

TEST(Autodiff, OrderedSumIsSequential) {
  Matrix m(3, 1);
  m << 1e16, 1.0, -1e16;
  // Left to right: (1e16 + 1) - 1e16 == 0 in double precision.
  EXPECT_EQ(ad::detail::ordered_sum(m), 0.0);
}

}  // namespace
