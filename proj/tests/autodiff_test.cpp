#include "agm/autodiff.hpp"

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "test_util.hpp"

namespace agm {
namespace {

using ad::Matrix;
using ad::Var;
using testing::numeric_gradient;
using testing::random_matrix;
using testing::relative_error;

// Checks d f(x) / dx for a unary builder against central differences.
void check_unary(const std::function<Var(const Var&)>& build, Matrix x0,
                 double tol = 1e-7) {
  Var x = ad::parameter(x0);
  Var y = ad::sum(ad::square(build(x)));
  Matrix analytic = ad::grad(y, std::vector<Var>{x})[0].value();
  Matrix probe = x0;
  auto f = [&] {
    ad::NoGradGuard g;
    return ad::sum(ad::square(build(ad::constant(probe)))).scalar();
  };
  Matrix numeric = numeric_gradient(f, probe);
  EXPECT_LT(relative_error(analytic, numeric), tol);
}

TEST(AutodiffTest, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  Matrix x = random_matrix(3, 4, rng);
  Matrix pos = (x.array().abs() + 0.5).matrix();
  check_unary([](const Var& v) { return ad::tanh(v); }, x);
  check_unary([](const Var& v) { return ad::exp(v); }, x);
  check_unary([](const Var& v) { return ad::log(v); }, pos);
  check_unary([](const Var& v) { return ad::pow_scalar(v, -0.5); }, pos);
  check_unary([](const Var& v) { return ad::gelu(v); }, x);
  check_unary([](const Var& v) { return ad::softmax_rows(v); }, x);
  check_unary([](const Var& v) { return ad::log_softmax_rows(v); }, x);
  check_unary([](const Var& v) { return ad::transpose(v); }, x);
  check_unary([](const Var& v) { return ad::row_sum(v); }, x);
  check_unary([](const Var& v) { return ad::col_sum(v); }, x);
  check_unary([](const Var& v) { return ad::slice_cols(v, 1, 2); }, x);
  check_unary([](const Var& v) { return ad::slice_rows(v, 1, 2); }, x);
}

TEST(AutodiffTest, LayerNormAndMatmulMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  Matrix w = random_matrix(4, 5, rng);
  Matrix gamma = random_matrix(1, 5, rng);
  Matrix beta = random_matrix(1, 5, rng);
  check_unary(
      [&](const Var& v) {
        return ad::layer_norm(ad::matmul(v, ad::constant(w)),
                              ad::constant(gamma), ad::constant(beta), 1e-5);
      },
      random_matrix(3, 4, rng));
}

TEST(AutodiffTest, GatherScatterAndConcat) {
  std::mt19937_64 rng(3);
  const std::vector<int> ids = {2, 0, 2};
  check_unary([&](const Var& v) { return ad::gather_rows(v, ids); },
              random_matrix(4, 3, rng));
  check_unary(
      [&](const Var& v) {
        std::vector<Var> parts = {ad::slice_cols(v, 0, 1), ad::tanh(v)};
        return ad::concat_cols(parts);
      },
      random_matrix(2, 3, rng));
}

TEST(AutodiffTest, CrossEntropyMatchesClosedForm) {
  Matrix logits(1, 2);
  logits << 0.3, -1.2;
  Var l = ad::parameter(logits);
  const std::vector<int> label = {1};
  Var loss = ad::cross_entropy(l, label);
  const double p1 = std::exp(-1.2) / (std::exp(0.3) + std::exp(-1.2));
  EXPECT_NEAR(loss.scalar(), -std::log(p1), 1e-12);
  Matrix g = ad::grad(loss, std::vector<Var>{l})[0].value();
  EXPECT_NEAR(g(0, 1), p1 - 1.0, 1e-12);
  EXPECT_NEAR(g(0, 0), 1.0 - p1, 1e-12);
}

// d/dW of ||d f / dx||^2 for f(x) = sum(tanh(x W)^2): a genuine second-order
// quantity, checked by differencing a first-order autodiff gradient.
TEST(AutodiffTest, DoubleBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Matrix x0 = random_matrix(2, 3, rng);
  Matrix w0 = random_matrix(3, 3, rng, 0.5);
  auto objective = [&](const Var& x, const Var& w) {
    Var f = ad::sum(ad::square(ad::tanh(ad::matmul(x, w))));
    Var gx = ad::grad(f, std::vector<Var>{x}, /*create_graph=*/true)[0];
    return ad::sum(ad::square(gx));
  };
  Var x = ad::parameter(x0);
  Var w = ad::parameter(w0);
  Matrix analytic = ad::grad(objective(x, w), std::vector<Var>{w})[0].value();
  Matrix probe = w0;
  auto f = [&] {
    Var xx = ad::parameter(x0);
    return objective(xx, ad::constant(probe)).scalar();
  };
  EXPECT_LT(relative_error(analytic, numeric_gradient(f, probe)), 1e-6);
}

TEST(AutodiffTest, NoGradGuardProducesConstants) {
  Var x = ad::parameter(Matrix::Ones(2, 2));
  {
    ad::NoGradGuard guard;
    Var y = ad::tanh(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(ad::tanh(x).requires_grad());
}

TEST(AutodiffTest, UnreachedInputGetsZeroGradient) {
  Var x = ad::parameter(Matrix::Ones(2, 2));
  Var unused = ad::parameter(Matrix::Ones(1, 3));
  auto g = ad::grad(ad::sum(x), std::vector<Var>{unused});
  EXPECT_EQ(g[0].value(), Matrix::Zero(1, 3));
}

TEST(AutodiffTest, BackwardAccumulatesIntoLeaves) {
  Var x = ad::parameter(Matrix::Constant(1, 2, 3.0));
  ad::backward(ad::sum(ad::square(x)));
  ad::backward(ad::sum(x));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
  x.zero_grad();
  EXPECT_EQ(x.grad().size(), 0);
}

TEST(AutodiffTest, GradientReversalIsIdentityForwardNegatedBackward) {
  Matrix v(1, 2);
  v << 1.5, -2.0;
  Var x = ad::parameter(v);
  Var y = ad::gradient_reversal(x, 0.7);
  EXPECT_EQ(y.value(), v);
  Matrix seed(1, 2);
  seed << 0.25, -4.0;
  Matrix g = ad::grad(y, std::vector<Var>{x}, false, ad::constant(seed))[0].value();
  EXPECT_EQ(g, (-0.7 * seed).eval());
}

}  // namespace
}  // namespace agm
