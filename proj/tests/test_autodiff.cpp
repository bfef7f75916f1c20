#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "normbench/autodiff.hpp"
#include "normbench/errors.hpp"
#include "normbench/finite_diff.hpp"
#include "test_support.hpp"

using namespace normbench;
using normbench::testing::max_rel_err;
using normbench::testing::random_tensor;

namespace {

Tensor<double> triple_loop_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

using GraphFn = std::function<Var<double>(std::vector<Var<double>>&)>;

// Builds the op on fresh leaves, backprops sum(out * w) for a fixed random w,
// and compares against central differences of the same scalar.
double grad_check(const GraphFn& fn, std::vector<Tensor<double>> inputs, std::mt19937_64& rng) {
  Tensor<double> weights;
  auto scalar_of = [&](Graph<double>& g, std::vector<Var<double>>& vars) {
    Var<double> out = fn(vars);
    if (weights.empty()) weights = random_tensor(out.shape(), rng, 0.5, 1.5);
    return sum_all(mul(out, g.constant(weights)));
  };
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (auto& t : inputs) vars.push_back(g.leaf(t));
  g.backward(scalar_of(g, vars));

  std::vector<Tensor<double>*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);
  std::function<double()> loss = [&] {
    Graph<double> h;
    std::vector<Var<double>> vs;
    for (auto& t : inputs) vs.push_back(h.constant(t));
    return scalar_of(h, vs).value().item();
  };
  auto fd = finite_diff(loss, std::span<Tensor<double>* const>(ptrs), 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) worst = std::max(worst, max_rel_err(g.grad(vars[i]), fd[i]));
  return worst;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph<double> g;
  auto eye = g.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  auto a = g.constant(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, a).value(), a.value());
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4}), b(Shape{2, 2}, {5, 6, 7, 8});
  Graph<double> g;
  auto c = matmul(g.constant(a), g.constant(b));
  EXPECT_EQ(c.value(), triple_loop_matmul(a, b));
  EXPECT_EQ(c.value(), Tensor<double>(Shape{2, 2}, {19, 22, 43, 50}));

  std::mt19937_64 rng(3);
  auto x = random_tensor({5, 7}, rng), y = random_tensor({7, 3}, rng);
  Graph<double> h;
  auto z = matmul(h.constant(x), h.constant(y));
  auto want = triple_loop_matmul(x, y);
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(z.value()[i], want[i], 1e-12);
}

TEST(Matmul, BackwardOfSumAgainstOnesColumn) {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  auto b = g.constant(Tensor<double>(Shape{2, 1}, {1, 1}));
  g.backward(sum_all(matmul(a, b)));
  EXPECT_EQ(g.grad(a), Tensor<double>(Shape{2, 2}, {1, 1, 1, 1}));
}

TEST(Matmul, RejectsInnerMismatch) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{2, 3}));
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(ReduceMoments, TwoPointSample) {
  Graph<double> g;
  auto m = reduce_moments(g.constant(Tensor<double>::vector({1, 3})), {0});
  EXPECT_DOUBLE_EQ(m.mean.value().item(), 2.0);
  EXPECT_DOUBLE_EQ(m.var.value().item(), 1.0);
}

TEST(ReduceMoments, ConstantHasZeroVariance) {
  Graph<double> g;
  auto m = reduce_moments(g.constant(Tensor<double>::vector({4.5, 4.5, 4.5})), {0});
  EXPECT_DOUBLE_EQ(m.mean.value().item(), 4.5);
  EXPECT_DOUBLE_EQ(m.var.value().item(), 0.0);
}

TEST(ReduceMoments, MeanGradientIsOneOverM) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::vector({1, -2, 5, 7}));
  g.backward(sum_all(reduce_moments(x, {0}).mean));
  const auto g_x = g.grad(x);
  for (double v : g_x.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(ReduceMoments, AxisSetAndKeepdims) {
  std::mt19937_64 rng(5);
  auto t = random_tensor({3, 4, 5}, rng);
  Graph<double> g;
  auto m = reduce_moments(g.constant(t), {0, 2}, true);
  ASSERT_EQ(m.mean.shape(), (Shape{1, 4, 1}));
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 5; ++k) s += t[(i * 4 + j) * 5 + k];
    const double mean = s / 15;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 5; ++k) s2 += std::pow(t[(i * 4 + j) * 5 + k] - mean, 2);
    EXPECT_NEAR(m.mean.value()[j], mean, 1e-14);
    EXPECT_NEAR(m.var.value()[j], s2 / 15, 1e-14);
  }
  EXPECT_THROW(reduce_moments(g.constant(t), {}), ShapeError);
  EXPECT_THROW(reduce_moments(g.constant(t), {3}), ShapeError);
}

TEST(ReduceMoments, VarianceIdentityProperty) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> ext(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_tensor({static_cast<std::size_t>(ext(rng)), static_cast<std::size_t>(ext(rng))}, rng);
    Graph<double> g;
    auto x = g.constant(t);
    auto m = reduce_moments(x, {0}, true);
    auto m2 = reduce_moments(square(x), {0}, true);
    for (std::size_t j = 0; j < m.var.value().numel(); ++j) {
      EXPECT_GE(m.var.value()[j], 0.0);
      const double mu = m.mean.value()[j];
      EXPECT_NEAR(m.var.value()[j], m2.mean.value()[j] - mu * mu, 1e-10);
    }
  }
}

TEST(Elementwise, BasicValues) {
  Graph<double> g;
  EXPECT_EQ(sqrt(g.constant(Tensor<double>::vector({4, 9}))).value(), Tensor<double>::vector({2, 3}));
  auto sum = add(g.constant(Tensor<double>::vector({1, 2})), g.constant(Tensor<double>::vector({10})));
  EXPECT_EQ(sum.value(), Tensor<double>::vector({11, 12}));
  auto rowwise = add(g.constant(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4})),
                     g.constant(Tensor<double>(Shape{2, 1}, {10, 20})));
  EXPECT_EQ(rowwise.value(), Tensor<double>(Shape{2, 2}, {11, 12, 23, 24}));
}

TEST(Elementwise, ReciprocalDerivativeMatchesFiniteDifferences) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::scalar(2.0));
  g.backward(sum_all(div(g.constant(Tensor<double>::scalar(1.0)), x)));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), -0.25);

  std::function<double(std::span<const Tensor<double>>)> f = [](std::span<const Tensor<double>> p) {
    return 1.0 / p[0].item();
  };
  auto fd = finite_diff(f, {Tensor<double>::scalar(2.0)}, 1e-5);
  EXPECT_NEAR(fd[0].item(), -0.25, 1e-9);
}

TEST(Elementwise, ErrorsOnBadShapesAndDomains) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  // mutual broadcasting is outside the supported forms
  EXPECT_THROW(add(g.constant(Tensor<double>(Shape{3, 1})), g.constant(Tensor<double>(Shape{1, 4}))),
               ShapeError);
  EXPECT_THROW(sqrt(g.constant(Tensor<double>::vector({-1.0}))), NumericError);
  EXPECT_THROW(div(g.constant(Tensor<double>::vector({1.0})), g.constant(Tensor<double>::vector({0.0}))),
               NumericError);
}

TEST(Softmax, ClosedFormCases) {
  Graph<double> g;
  auto a = softmax(g.constant(Tensor<double>::vector({0, 0})), 0);
  EXPECT_DOUBLE_EQ(a.value()[0], 0.5);
  auto b = softmax(g.constant(Tensor<double>::vector({1000, 1000})), 0);
  EXPECT_DOUBLE_EQ(b.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(b.value()[1], 0.5);
  auto c = softmax(g.constant(Tensor<double>::vector({0, std::log(3.0)})), 0);
  EXPECT_NEAR(c.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(c.value()[1], 0.75, 1e-15);
}

TEST(Softmax, NormalizedAndShiftInvariantProperty) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_tensor({3, 5, 4}, rng, -5, 5);
    const std::size_t axis = static_cast<std::size_t>(trial % 3);
    auto shifted = t;
    // add a constant along the axis: the same offset for each line through it
    const double c = shift(rng);
    for (auto& v : shifted.storage()) v += c;
    Graph<double> g;
    auto y = softmax(g.constant(t), axis);
    auto ys = softmax(g.constant(shifted), axis);
    auto sums = reduce_moments(y, {axis}).mean;
    for (double s : sums.value().data()) EXPECT_NEAR(s * static_cast<double>(t.dim(axis)), 1.0, 1e-12);
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_NEAR(y.value()[i], ys.value()[i], 1e-12);
  }
}

TEST(Backward, SumAndSquare) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2, 3}, 1.5));
  g.backward(sum_all(x));
  const auto g_x = g.grad(x);
  for (double v : g_x.data()) EXPECT_EQ(v, 1.0);

  Graph<double> h;
  auto y = h.leaf(Tensor<double>::vector({3}));
  h.backward(sum_all(mul(y, y)));
  EXPECT_DOUBLE_EQ(h.grad(y).item(), 6.0);
}

TEST(Backward, SecondCallIsAnError) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::vector({1, 2}));
  auto loss = sum_all(x);
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), StateError);
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::vector({1, 2}));
  EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Backward, ReachableNodesGetMatchingShapes) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3, 4}, 0.5));
  auto w = g.leaf(Tensor<double>(Shape{4, 2}, 0.25));
  auto h = relu(matmul(x, w));
  auto loss = mean_all(h);
  g.backward(loss);
  for (auto v : {x, w, h}) {
    EXPECT_TRUE(g.has_grad(v));
    EXPECT_EQ(g.grad(v).shape(), v.shape());
  }
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(23);
  GraphFn fn = [](std::vector<Var<double>>& v) {
    auto h = relu(add(matmul(v[0], v[1]), v[2]));
    auto m = reduce_moments(h, {0}, true);
    auto z = div(sub(h, m.mean), sqrt(add_scalar(m.var, 1e-3)));
    return softmax(mul(z, exp(scale(v[2], 0.5))), 1);
  };
  const double err = grad_check(fn, {random_tensor({6, 4}, rng), random_tensor({4, 3}, rng), random_tensor({3}, rng)},
                                rng);
  EXPECT_LT(err, 1e-4);
}

TEST(FiniteDiff, ClosedForms) {
  std::function<double(std::span<const Tensor<double>>)> sq = [](auto p) { return p[0].item() * p[0].item(); };
  EXPECT_NEAR(finite_diff(sq, {Tensor<double>::scalar(3.0)}, 1e-5)[0].item(), 6.0, 1e-6);
  std::function<double(std::span<const Tensor<double>>)> cube = [](auto p) { return std::pow(p[0].item(), 3); };
  EXPECT_NEAR(finite_diff(cube, {Tensor<double>::scalar(1.0)}, 1e-5)[0].item(), 3.0, 1e-4);
  std::function<double(std::span<const Tensor<double>>)> flat = [](auto) { return 7.0; };
  const auto zero = finite_diff(flat, {Tensor<double>(Shape{4}, 1.0)}, 1e-5);
  for (double v : zero[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, NonFiniteEvaluationIsAnError) {
  std::function<double(std::span<const Tensor<double>>)> bad = [](auto p) { return std::log(p[0].item()); };
  EXPECT_THROW(finite_diff(bad, {Tensor<double>::scalar(0.0)}, 1e-5), NumericError);
}

// Every differentiable op against central differences on 100 random draws.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  const auto pos = [&](Shape s) { return random_tensor(std::move(s), rng, 0.1, 2.0); };
  const auto any = [&](Shape s) { return random_tensor(std::move(s), rng); };
  struct Case {
    GraphFn fn;
    std::vector<Tensor<double>> in;
  };
  std::vector<Case> cases = {
      {[](auto& v) { return add(v[0], v[1]); }, {any({3, 4}), any({4})}},
      {[](auto& v) { return sub(v[0], v[1]); }, {any({3, 4}), any({3, 1})}},
      {[](auto& v) { return mul(v[0], v[1]); }, {any({2, 3, 4}), any({3, 4})}},
      {[](auto& v) { return div(v[0], v[1]); }, {any({3, 4}), pos({4})}},
      {[](auto& v) { return div(v[1], v[0]); }, {pos({3, 4}), any({1})}},
      {[](auto& v) { return sqrt(v[0]); }, {pos({5})}},
      {[](auto& v) { return relu(v[0]); }, {any({6})}},
      {[](auto& v) { return exp(v[0]); }, {any({6})}},
      {[](auto& v) { return log(v[0]); }, {pos({6})}},
      {[](auto& v) { return square(v[0]); }, {any({6})}},
      {[](auto& v) { return scale(add_scalar(v[0], 0.3), -1.7); }, {any({6})}},
      {[](auto& v) { return matmul(v[0], v[1]); }, {any({3, 4}), any({4, 2})}},
      {[](auto& v) { return bmm(v[0], transpose_last2(v[1])); }, {any({2, 3, 4}), any({2, 5, 4})}},
      {[](auto& v) { return reduce_moments(v[0], {0}, true).var; }, {any({5, 3})}},
      {[](auto& v) { return reduce_moments(v[0], {1}).mean; }, {any({5, 3})}},
      {[](auto& v) { return softmax(v[0], 1); }, {any({3, 5})}},
      {[](auto& v) { return softmax(v[0], 0); }, {any({3, 5})}},
      {[](auto& v) {
         const std::vector<std::size_t> idx{2, 0, 2};
         return scatter_rows(gather_rows(v[0], std::span<const std::size_t>(idx)),
                             std::span<const std::size_t>(std::vector<std::size_t>{1, 3, 4}), 6);
       },
       {any({3, 4})}},
      {[](auto& v) {
         std::vector<Var<double>> parts{slice_cols(v[0], 1, 2), v[1]};
         return concat_cols(std::span<const Var<double>>(parts));
       },
       {any({3, 4}), any({3, 2})}},
      {[](auto& v) {
         const std::vector<int> tgt{1, 0, 2};
         const std::vector<double> w{1.0, 0.5, 2.0};
         return cross_entropy(v[0], std::span<const int>(tgt), std::span<const double>(w));
       },
       {any({3, 3})}},
  };
  for (std::size_t c = 0; c < cases.size(); ++c)
    EXPECT_LT(grad_check(cases[c].fn, cases[c].in, rng), 1e-4) << "op case " << c;
}

INSTANTIATE_TEST_SUITE_P(RandomTrials, OpGradient, ::testing::Range(0, 100));

TEST(StopGradient, BlocksTheGradientPath) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::vector({2.0}));
  auto y = mul(x, stop_gradient(x));
  g.backward(sum_all(y));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 2.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Graph<double> g;
  const std::vector<int> tgt{0, 3};
  const std::vector<double> w{1.0, 1.0};
  auto l = cross_entropy(g.constant(Tensor<double>(Shape{2, 4}, 0.0)), std::span<const int>(tgt),
                         std::span<const double>(w));
  EXPECT_NEAR(l.value().item(), std::log(4.0), 1e-15);
}
