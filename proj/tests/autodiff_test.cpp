#include "mklab/gradcheck.hpp"
#include "mklab/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using mklab::GradCheckReport;
using mklab::NoGradGuard;
using mklab::Shape;
using mklab::Tensor;

namespace {

using Td = Tensor<double>;
using Leaves = std::vector<Td>;

// ---------------------------------------------------------------------------
// Hand-derived gradients. These anchor both the autodiff engine and the
// finite-difference checker before either is trusted on anything bigger.
// ---------------------------------------------------------------------------

TEST(Backward, SumOfSquaresGradientIsTwoX) {
  auto x = Td::from({3}, {1, 2, 3}).set_requires_grad(true);
  auto loss = sum_all(mul(x, x));
  EXPECT_DOUBLE_EQ(loss.item(), 14.0);
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6);
}

TEST(Backward, AffineGradientIsConstant) {
  auto x = Td::from({4}, {0, 1, -2, 5}).set_requires_grad(true);
  auto loss = sum_all(add_scalar(scale(x, 3.0), 1.0));
  loss.backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 3.0);
}

TEST(Backward, MatmulSumGradients) {
  // f = sum(A.B): dA[i,k] = sum_j B[k,j] (row sums of B), dB[k,j] = sum_i A[i,k].
  auto a = Td::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  auto b = Td::from({2, 2}, {5, 6, 7, 8}).set_requires_grad(true);
  sum_all(matmul(a, b)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 11);  // 5+6
  EXPECT_DOUBLE_EQ(a.grad()[1], 15);  // 7+8
  EXPECT_DOUBLE_EQ(a.grad()[2], 11);
  EXPECT_DOUBLE_EQ(a.grad()[3], 15);
  EXPECT_DOUBLE_EQ(b.grad()[0], 4);  // 1+3
  EXPECT_DOUBLE_EQ(b.grad()[1], 4);
  EXPECT_DOUBLE_EQ(b.grad()[2], 6);  // 2+4
  EXPECT_DOUBLE_EQ(b.grad()[3], 6);
}

TEST(Backward, SharedSubexpressionCountsBothPaths) {
  // y = x + x, f = sum(y*y) = 4*sum(x^2) so df/dx = 8x.
  auto x = Td::from({2}, {1.5, -2.0}).set_requires_grad(true);
  auto y = add(x, x);
  sum_all(mul(y, y)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -16.0);
}

TEST(Backward, BroadcastAddReducesOntoSmallOperand) {
  auto a = Td::zeros({2, 3}).set_requires_grad(true);
  auto b = Td::zeros({3}).set_requires_grad(true);
  sum_all(add(a, b)).backward();
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 2.0);  // two rows fold in
}

TEST(Backward, AccumulateModeAddsAcrossCalls) {
  auto x = Td::from({2}, {1, 2}).set_requires_grad(true);
  auto run = [&] { sum_all(mul(x, x)).backward(); };
  run();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
  run();  // no zero_grad in between: gradients accumulate by contract
  EXPECT_DOUBLE_EQ(x.grad()[0], 4);
  x.zero_grad();
  run();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
}

TEST(Backward, NonScalarRootThrowsContractError) {
  auto x = Td::from({2}, {1, 2}).set_requires_grad(true);
  auto y = mul(x, x);
  EXPECT_THROW(y.backward(), mklab::ContractError);
}

TEST(Backward, UntouchedLeafKeepsZeroGrad) {
  auto x = Td::from({2}, {1, 2}).set_requires_grad(true);
  auto unused = Td::from({2}, {3, 4}).set_requires_grad(true);
  sum_all(x).backward();
  EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(unused.grad()[1], 0.0);
}

TEST(NoGrad, GuardSuppressesRecording) {
  auto x = Td::from({2}, {1, 2}).set_requires_grad(true);
  {
    NoGradGuard ng;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  auto y = mul(x, x);
  EXPECT_TRUE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// The checker itself: passes a correct gradient, flags a corrupted one.
// ---------------------------------------------------------------------------

TEST(GradCheck, AcceptsCorrectGradient) {
  auto r = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(mul(ls[0], ls[0])); },
      {Td::from({3}, {0.3, -1.1, 2.0})});
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.checked, 3u);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(GradCheck, RejectsCorruptedGradient) {
  // Same value function as x*x but with derivative deliberately 3x, not 2x.
  auto bad_square = [](const Td& x) {
    return mklab::detail::unary_op(
        x, "bad_square", [](double v) { return v * v; }, [](double v, double) { return 3.0 * v; });
  };
  auto r = mklab::gradcheck(
      [&](Leaves& ls) { return sum_all(bad_square(ls[0])); },
      {Td::from({3}, {0.5, 1.0, -2.0})});
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.failures.size(), 3u);
  EXPECT_GT(r.max_rel_err, 0.1);
  EXPECT_NE(r.summary().find("FAIL"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Finite-difference property sweep over every differentiable op, many seeds.
// ---------------------------------------------------------------------------

class FdSweep : public ::testing::TestWithParam<int> {};

TEST_P(FdSweep, MatmulChain) {
  mklab::Rng rng(1000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(mul(matmul(ls[0], ls[1]), matmul(ls[0], ls[1]))); },
      {Td::randn({3, 4}, rng), Td::randn({4, 2}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
}

TEST_P(FdSweep, BatchedMatmulBroadcast) {
  mklab::Rng rng(2000 + GetParam());
  // a batched, b shared: db must fold the batch axis.
  auto r = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(mul(matmul(ls[0], ls[1]), ls[2])); },
      {Td::randn({2, 2, 3}, rng), Td::randn({3, 2}, rng), Td::randn({2, 2, 2}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
  mklab::Rng rng2(2500 + GetParam());
  auto r2 = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(matmul(ls[0], ls[1])); },
      {Td::randn({2, 3}, rng2), Td::randn({4, 3, 2}, rng2)});
  EXPECT_TRUE(r2.pass) << r2.summary();
}

TEST_P(FdSweep, SoftmaxAndReductions) {
  mklab::Rng rng(3000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) {
        auto s = softmax(ls[0], 1);
        return reduce_mean(mul(s, ls[1]), {0, 1});
      },
      {Td::randn({3, 4}, rng), Td::randn({3, 4}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
  mklab::Rng rng2(3500 + GetParam());
  auto r2 = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(mul(softmax(ls[0], 0), softmax(ls[0], 0))); },
      {Td::randn({4, 2}, rng2)});
  EXPECT_TRUE(r2.pass) << r2.summary();
}

TEST_P(FdSweep, GeluAndRsqrt) {
  mklab::Rng rng(4000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(gelu(ls[0])); }, {Td::randn({5}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
  // keep inputs positive and away from 0 for rsqrt
  auto x = Td::randn({4}, rng);
  for (auto& v : x.data()) v = std::abs(v) + 0.5;
  auto r2 = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(rsqrt_shift(ls[0], 1e-5)); }, {x});
  EXPECT_TRUE(r2.pass) << r2.summary();
}

TEST_P(FdSweep, ShapeOpsCompose) {
  mklab::Rng rng(5000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) {
        auto y = ls[0].reshape({3, 2, 2}).permute({1, 0, 2});
        auto h = y.narrow(1, 1, 2);
        auto g = concat(h, h, 0);
        return sum_all(mul(g, g));
      },
      {Td::randn({2, 6}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
  mklab::Rng rng2(5500 + GetParam());
  auto r2 = mklab::gradcheck(
      [](Leaves& ls) { return sum_all(mul(ls[0].broadcast_to({4, 3}), ls[1])); },
      {Td::randn({1, 3}, rng2), Td::randn({4, 3}, rng2)});
  EXPECT_TRUE(r2.pass) << r2.summary();
}

TEST_P(FdSweep, LinearLayerNormStack) {
  mklab::Rng rng(6000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) {
        auto y = linear(ls[0], ls[1], &ls[2]);
        auto n = layer_norm(y, ls[3], ls[4]);
        return reduce_mean(mul(n, n), {0, 1});
      },
      {Td::randn({3, 4}, rng), Td::randn({2, 4}, rng), Td::randn({2}, rng),
       Td::randn({2}, rng), Td::randn({2}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
}

TEST_P(FdSweep, GroupedConvGradients) {
  mklab::Rng rng(7000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) {
        auto y = grouped_pointwise_conv(ls[0], ls[1], 2);
        return sum_all(mul(y, y));
      },
      {Td::randn({2, 4, 3}, rng), Td::randn({4, 2}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
}

TEST_P(FdSweep, CrossEntropyGradient) {
  mklab::Rng rng(8000 + GetParam());
  auto r = mklab::gradcheck(
      [](Leaves& ls) { return cross_entropy_mean(ls[0], {1, 0, 2}); },
      {Td::randn({3, 3}, rng)});
  EXPECT_TRUE(r.pass) << r.summary();
}

INSTANTIATE_TEST_SUITE_P(Seeds, FdSweep, ::testing::Range(0, 20));

}  // namespace
