#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dann/autodiff.hpp"
#include "dann/optim.hpp"
#include "grad_check.hpp"

namespace dann {
namespace {

using testing::grad_check;
using testing::random_tensor;

constexpr double kFdTol = 1e-6;

TEST(PrimitiveOps, ReluForwardAndBackward) {
  Graph g;
  Parameter x("x", Tensor::vector({-1.0, 0.0, 2.0}));
  Var y = relu(g.param(x));
  EXPECT_EQ(y.value(), Tensor::vector({0.0, 0.0, 2.0}));
  g.backward(sum(y));
  EXPECT_EQ(x.grad, Tensor::vector({0.0, 0.0, 1.0}));
}

TEST(PrimitiveOps, SoftmaxOfEqualLogitsIsUniform) {
  Graph g;
  Var y = softmax(g.constant(Tensor::vector({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(PrimitiveOps, MaxOverTimePicksPerChannelMaximum) {
  Graph g;
  Var y = max_over_time(g.constant(Tensor::matrix({{1, 5}, {3, 2}, {0, 0}})));
  EXPECT_EQ(y.value(), Tensor::vector({3.0, 5.0}));
}

TEST(PrimitiveOps, GroupedMaxOverTime) {
  Graph g;
  Var y = max_over_time(
      g.constant(Tensor::matrix({{1, 5}, {3, 2}, {-1, 7}, {-2, 0}})), 2);
  EXPECT_EQ(y.value(), Tensor::matrix({{3, 5}, {-1, 7}}));
}

TEST(PrimitiveOps, AddBroadcastsOverTrailingAxis) {
  Graph g;
  Var a = g.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  Var y = add(a, g.constant(Tensor::vector({10, 20, 30})));
  EXPECT_EQ(y.value(), Tensor::matrix({{11, 22, 33}, {14, 25, 36}}));
  Var z = mul(a, g.constant(Tensor::matrix({{2}, {0}})));
  EXPECT_EQ(z.value(), Tensor::matrix({{2, 4, 6}, {0, 0, 0}}));
}

TEST(PrimitiveOps, ShapeMismatchNamesOpAndShapes) {
  Graph g;
  Var a = g.constant(Tensor(Shape{2, 3}));
  Var b = g.constant(Tensor(Shape{2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), Error);
}

TEST(PrimitiveOps, EmptyAxisFails) {
  Graph g;
  Var e = g.constant(Tensor(Shape{0}));
  EXPECT_THROW(softmax(e), Error);
  EXPECT_THROW(mean(e, 0), Error);
  EXPECT_THROW(mean(e), Error);
}

TEST(PrimitiveOps, DropoutIsIdentityInEvaluation) {
  Graph g(/*training=*/false);
  Rng rng(1);
  Var x = g.constant(Tensor::vector({1.0, 2.0, 3.0}));
  Var y = dropout(x, 0.5, rng);
  EXPECT_EQ(y.id(), x.id());
}

TEST(PrimitiveOps, DropoutUsesInvertedScaling) {
  Graph g(/*training=*/true);
  Rng rng(7);
  Var y = dropout(g.constant(Tensor(Shape{4000}, 1.0)), 0.5, rng);
  double total = 0.0;
  for (double v : y.value().data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    total += v;
  }
  EXPECT_NEAR(total / 4000.0, 1.0, 0.05);
}

TEST(PrimitiveOps, ConcatAndSlices) {
  Graph g;
  Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = g.constant(Tensor::matrix({{5}, {6}}));
  EXPECT_EQ(concat({a, b}, 1).value(), Tensor::matrix({{1, 2, 5}, {3, 4, 6}}));
  EXPECT_EQ(concat({a, a}, 0).value().shape(), (Shape{4, 2}));
  EXPECT_EQ(slice_cols(a, 1, 2).value(), Tensor::matrix({{2}, {4}}));
  EXPECT_EQ(gather_rows(a, {1, 1, 0}).value(),
            Tensor::matrix({{3, 4}, {3, 4}, {1, 2}}));
}

TEST(Backward, MeanOfSquares) {
  Graph g;
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  Var wv = g.param(w);
  g.backward(mean(mul(wv, wv)));
  EXPECT_EQ(w.grad, Tensor::vector({1.0, 2.0}));
}

TEST(Backward, LinearMapGradientIsOuterProduct) {
  Graph g;
  Parameter a("A", Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  Tensor x = Tensor::matrix({{7}, {8}, {9}});
  g.backward(sum(matmul(g.param(a), g.constant(x))));
  EXPECT_EQ(a.grad, Tensor::matrix({{7, 8, 9}, {7, 8, 9}}));
}

TEST(Backward, NonScalarLossFails) {
  Graph g;
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(g.backward(g.param(w)), Error);
}

TEST(Backward, RepeatedCallsAccumulateUntilReset) {
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Graph g;
    Var wv = g.param(w);
    g.backward(mean(mul(wv, wv)));
  }
  EXPECT_EQ(w.grad, Tensor::vector({2.0, 4.0}));
  w.zero_grad();
  EXPECT_EQ(w.grad, Tensor::vector({0.0, 0.0}));
}

TEST(Backward, SameGraphTwiceAccumulatesOnlyIntoParameters) {
  Graph g;
  Parameter w("w", Tensor::vector({3.0}));
  Var wv = g.param(w);
  Var loss = sum(mul(tanh(wv), wv));
  g.backward(loss);
  const double once = w.grad[0];
  g.backward(loss);
  EXPECT_DOUBLE_EQ(w.grad[0], 2.0 * once);
}

TEST(Backward, DumpListsAdjacency) {
  Graph g;
  Parameter w("w", Tensor::vector({1.0}));
  Var y = relu(g.param(w));
  (void)y;
  const std::string d = g.dump();
  EXPECT_NE(d.find("0 param:w [1] *"), std::string::npos);
  EXPECT_NE(d.find("1 relu [1] * <- 0"), std::string::npos);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  Rng rng(2024);
  Parameter a("a", random_tensor(rng, {1, 2}));
  Parameter b("b", random_tensor(rng, {2, 1}));
  Parameter c("c", random_tensor(rng, {1, 1}));
  Parameter d("d", random_tensor(rng, {1, 1}));
  Parameter e("e", random_tensor(rng, {1, 1}));
  auto build = [&](Graph& g) {
    Var h = tanh(matmul(g.param(a), g.param(b)));          // [1x1]
    Var logits = concat({h, mul(g.param(c), g.param(d)), g.param(e)}, 1);
    Var p = softmax(logits, 1);
    return sum(mul(p, g.constant(Tensor::matrix({{1.0, -2.0, 0.5}}))));
  };
  auto r = grad_check(build, {&a, &b, &c, &d, &e});
  EXPECT_EQ(r.checked, 7u);
  EXPECT_LT(r.max_rel_error, kFdTol) << r.worst;
}

// Every primitive op against central differences on random tensors.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  Parameter x("x", random_tensor(rng, {3, 4}));
  Parameter y("y", random_tensor(rng, {3, 4}));
  Parameter w("w", random_tensor(rng, {4, 2}));
  Parameter row("row", random_tensor(rng, {4}));
  Parameter col("col", random_tensor(rng, {3, 1}));
  const Tensor probe = random_tensor(rng, {3, 4});
  Rng dropout_rng(5);
  auto weighted = [&](Graph& g, Var v) {
    if (v.value().shape() == probe.shape()) {
      return sum(mul(v, g.constant(probe)));
    }
    Tensor p(v.value().shape());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::sin(1.0 + i);
    return sum(mul(v, g.constant(p)));
  };
  const int which = GetParam();
  auto build = [&](Graph& g) -> Var {
    Var xv = g.param(x);
    switch (which) {
      case 0: return weighted(g, matmul(xv, g.param(w)));
      case 1: return weighted(g, add(xv, g.param(y)));
      case 2: return weighted(g, add(xv, g.param(row)));
      case 3: return weighted(g, mul(xv, g.param(y)));
      case 4: return weighted(g, mul(xv, g.param(col)));
      case 5: return weighted(g, relu(xv));
      case 6: return weighted(g, tanh(xv));
      case 7: return weighted(g, sigmoid(xv));
      case 8: return weighted(g, exp(xv));
      case 9: return weighted(g, softmax(xv, 1));
      case 10: return weighted(g, softmax(xv, 0));
      case 11: return weighted(g, mean(xv, 0));
      case 12: return weighted(g, mean(xv, 1));
      case 13: return weighted(g, max_over_time(xv));
      case 14: return weighted(g, concat({xv, g.param(y)}, 1));
      case 15: {
        Rng local = dropout_rng;
        return weighted(g, dropout(xv, 0.3, local));
      }
      case 16: return weighted(g, gather_rows(xv, {2, 0, 2}));
      case 17: return weighted(g, scale(xv, -1.7));
      case 18: return weighted(g, sub(xv, g.param(col)));
      case 19: return weighted(g, slice_cols(xv, 1, 3));
      case 20: return weighted(g, transpose(xv));
      case 21: {
        Tensor mask = Tensor::matrix({{1, 1, 0, 1}, {1, 0, 0, 0}, {0, 1, 1, 1}});
        return weighted(g, masked_softmax(xv, mask));
      }
      case 22: return weighted(g, scale(one_minus(xv), 0.5));
      case 23: {
        const int labels[] = {1, 3, 0};
        return cross_entropy(xv, labels);
      }
      case 24: return wasserstein_loss(slice_cols(xv, 0, 1), slice_cols(xv, 2, 4));
      default: return mean(xv);
    }
  };
  std::vector<Parameter*> params = {&x, &y, &w, &row, &col};
  auto r = grad_check(build, params);
  EXPECT_LT(r.max_rel_error, kFdTol) << "case " << which << ": " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 25));

TEST(Grl, ForwardIsIdentityBitExact) {
  Graph g;
  Tensor in = Tensor::vector({3.0, -1.0});
  Var y = grl(g.constant(in), GrlConfig{0.5});
  EXPECT_TRUE(bit_identical(y.value(), in));
}

TEST(Grl, BackwardScalesByNegativeLambda) {
  Graph g;
  Parameter x("x", Tensor::vector({3.0, -1.0}));
  Var y = grl(g.param(x), GrlConfig{0.5});
  g.backward(sum(y));
  EXPECT_EQ(x.grad, Tensor::vector({-0.5, -0.5}));
}

// The reversed gradient is checked against finite differences of the
// unreversed function, scaled by -lambda.
TEST(Grl, ReversedGradientMatchesScaledFiniteDifferences) {
  Rng rng(77);
  Parameter x("x", random_tensor(rng, {2, 3}));
  Parameter w("w", random_tensor(rng, {3, 2}));
  const double lambda = 0.7;
  auto head = [&](Graph& g, Var in) { return sum(tanh(matmul(in, g.param(w)))); };
  {
    Graph g;
    g.backward(head(g, grl(g.param(x), GrlConfig{lambda})));
  }
  const Tensor reversed = x.grad;
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.value.size(); ++i) {
    const double orig = x.value[i];
    auto eval = [&](double v) {
      x.value[i] = v;
      Graph g;
      return head(g, g.param(x)).value().item();
    };
    const double numeric = (eval(orig + h) - eval(orig - h)) / (2 * h);
    x.value[i] = orig;
    EXPECT_LT(testing::rel_error(reversed[i], -lambda * numeric), kFdTol);
  }
}

TEST(Grl, ZeroLambdaSeversGradient) {
  Graph g;
  Parameter x("x", Tensor::vector({4.0}));
  Var y = grl(g.param(x), GrlConfig{0.0});
  g.backward(sum(scale(y, 2.0)));
  EXPECT_EQ(x.grad[0], 0.0);
}

TEST(Grl, BackwardIsExactlyMinusLambdaTimesUpstream) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const double lambda = uniform(rng, 0.0, 2.0);
    Tensor up = random_tensor(rng, {5});
    Graph g;
    Parameter x("x", random_tensor(rng, {5}));
    g.backward(sum(mul(grl(g.param(x), GrlConfig{lambda}), g.constant(up))));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad[i], -lambda * up[i]);
  }
  Graph g;
  EXPECT_THROW(grl(g.constant(Tensor::vector({1.0})), GrlConfig{-0.1}), Error);
}

TEST(Losses, CrossEntropyValues) {
  Graph g;
  Parameter logits("l", Tensor::vector({0.0, 0.0}));
  Var ce = cross_entropy(g.param(logits), 0);
  EXPECT_NEAR(ce.value().item(), std::log(2.0), 1e-15);
  g.backward(ce);
  EXPECT_DOUBLE_EQ(logits.grad[0], -0.5);
  EXPECT_DOUBLE_EQ(logits.grad[1], 0.5);

  Var sure = cross_entropy(g.constant(Tensor::vector({10.0, -10.0})), 0);
  EXPECT_NEAR(sure.value().item(), 2.06115362e-9, 1e-15);
  EXPECT_THROW(cross_entropy(g.constant(Tensor::vector({0.0, 0.0})), 2), Error);
  EXPECT_THROW(cross_entropy(g.constant(Tensor::vector({0.0, 0.0})), -1), Error);
}

TEST(Losses, WassersteinEstimate) {
  Graph g;
  auto w = [&](Tensor s, Tensor t) {
    return wasserstein_loss(g.constant(std::move(s)), g.constant(std::move(t)))
        .value()
        .item();
  };
  EXPECT_DOUBLE_EQ(w(Tensor::vector({1, 1}), Tensor::vector({0, 0})), 1.0);
  EXPECT_DOUBLE_EQ(w(Tensor::vector({0.3, -2}), Tensor::vector({0.3, -2})), 0.0);
  EXPECT_DOUBLE_EQ(w(Tensor::vector({2}), Tensor::vector({-1, 3})), 1.0);
  EXPECT_THROW(w(Tensor(Shape{0}), Tensor::vector({1})), Error);
  EXPECT_THROW(w(Tensor::vector({1}), Tensor(Shape{0})), Error);
}

TEST(Properties, SoftmaxRowsSumToOne) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    Var p = softmax(g.constant(random_tensor(rng, {4, 7}, -30.0, 30.0)), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.value().at(r, c), 0.0);
        s += p.value().at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, CheckedModeRejectsNonFinite) {
  Graph g;
  g.set_checked(true);
  EXPECT_THROW(exp(g.constant(Tensor::vector({1000.0}))), Error);
}

TEST(Adam, FirstStepMatchesHandEvaluation) {
  Tensor p = Tensor::vector({0.0});
  AdamState s(p.shape());
  adam_step(p, Tensor::vector({1.0}), s, 0.01);
  // m = 0.1, v = 0.001, both bias corrections give 1.
  const double m_hat = 0.1 / (1.0 - 0.9);
  const double v_hat = 0.001 / (1.0 - 0.999);
  EXPECT_DOUBLE_EQ(s.m[0], 0.1);
  EXPECT_DOUBLE_EQ(s.v[0], 0.001);
  EXPECT_EQ(s.t, 1);
  EXPECT_NEAR(p[0], -0.01 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
  EXPECT_NEAR(p[0], -0.0099999999, 1e-10);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor p = Tensor::vector({0.25, -3.0});
  AdamState s(p.shape());
  adam_step(p, Tensor::vector({0.0, 0.0}), s, 0.01);
  EXPECT_EQ(p, Tensor::vector({0.25, -3.0}));
}

TEST(Adam, IdenticalInputsGiveIdenticalTrajectories) {
  Tensor a = Tensor::vector({0.5, -0.2});
  Tensor b = a;
  AdamState sa(a.shape()), sb(b.shape());
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Tensor grad = random_tensor(rng, {2});
    adam_step(a, grad, sa, 0.01);
    adam_step(b, grad, sb, 0.01);
    EXPECT_TRUE(bit_identical(a, b));
  }
  EXPECT_THROW(adam_step(a, Tensor::vector({1.0}), sa, 0.01), Error);
  for (double v : sa.v.data()) EXPECT_GE(v, 0.0);
}

TEST(Clip, ClampsIntoInterval) {
  Tensor t = Tensor::vector({-0.5, 0.005, 0.02});
  Tensor* ts[] = {&t};
  clip_params(std::span<Tensor* const>(ts), 0.01);
  EXPECT_EQ(t, Tensor::vector({-0.01, 0.005, 0.01}));
  Tensor once = t;
  clip_params(std::span<Tensor* const>(ts), 0.01);
  EXPECT_EQ(t, once);
  Tensor z(Shape{3});
  Tensor* zs[] = {&z};
  clip_params(std::span<Tensor* const>(zs), 0.01);
  EXPECT_EQ(z, Tensor(Shape{3}));
  EXPECT_THROW(clip_params(std::span<Tensor* const>(ts), 0.0), Error);
}

TEST(Clip, MaxAbsNeverExceedsBound) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = random_tensor(rng, {50}, -5.0, 5.0);
    Tensor* ts[] = {&t};
    const double c = uniform(rng, 1e-3, 1.0);
    clip_params(std::span<Tensor* const>(ts), c);
    EXPECT_LE(t.max_abs(), c);
  }
}

}  // namespace
}  // namespace dann
