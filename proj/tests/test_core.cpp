#include <gtest/gtest.h>

#include <random>

#include "occludrop/occludrop.hpp"
#include "oracles.hpp"

using namespace occludrop;
using TD = Tensor<double>;

namespace {

std::vector<double> uniform_values(std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(count);
  for (auto& x : v) x = u(rng);
  return v;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST(Conv, OnesSumToNine) {
  auto x = TD::full({1, 1, 3, 3}, 1.0);
  auto w = TD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 0);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv, CenteredDeltaIsIdentity) {
  std::mt19937_64 rng(3);
  auto x = TD::from({2, 1, 5, 5}, uniform_values(50, rng));
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto y = conv2d(x, TD::from({1, 1, 3, 3}, k), 1, 1);
  EXPECT_EQ(max_abs_diff(y.values(), std::vector<double>(x.values().begin(), x.values().end())), 0.0);
}

TEST(Conv, MatchesLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3 == 0 ? 0 : 1, k = seed % 4 == 0 ? 1 : 3;
    auto xv = uniform_values(2 * 3 * 7 * 7, rng), wv = uniform_values(4 * 3 * k * k, rng);
    auto y = conv2d(TD::from({2, 3, 7, 7}, xv), TD::from({4, 3, k, k}, wv), stride, pad);
    std::size_t ho = 0, wo = 0;
    const auto ref = oracle::conv2d(xv, 2, 3, 7, 7, wv, 4, k, stride, pad, ho, wo);
    ASSERT_EQ(y.shape(), (Shape{2, 4, ho, wo}));
    EXPECT_LE(max_abs_diff(y.values(), ref), 1e-10) << "seed " << seed;
  }
}

TEST(Linear, IdentityAndBias) {
  std::mt19937_64 rng(5);
  auto x = TD::from({3, 4}, uniform_values(12, rng));
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  auto y = linear(x, TD::from({4, 4}, eye), TD::zeros({4}));
  EXPECT_EQ(max_abs_diff(y.values(), std::vector<double>(x.values().begin(), x.values().end())), 0.0);
  auto z = linear(x, TD::zeros({2, 4}), TD::from({2}, {0.5, -2.0}));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(z.values()[r * 2], 0.5);
    EXPECT_EQ(z.values()[r * 2 + 1], -2.0);
  }
}

TEST(Linear, MatchesLoopOracle) {
  std::mt19937_64 rng(9);
  auto xv = uniform_values(12, rng), wv = uniform_values(20, rng), bv = uniform_values(5, rng);
  auto y = linear(TD::from({3, 4}, xv), TD::from({5, 4}, wv), TD::from({5}, bv));
  EXPECT_LE(max_abs_diff(y.values(), oracle::linear(xv, 3, 4, wv, bv, 5)), 1e-12);
}

TEST(Gemm, TiledProductEqualsSequentialLoop) {
  std::mt19937_64 rng(11);
  for (auto [m, n, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{7, 33, 5}, {16, 64, 19}, {1, 1, 1}}) {
    auto a = uniform_values(m * k, rng), b = uniform_values(k * n, rng);
    std::vector<double> c(m * n, 0.0), ref(m * n, 0.0);
    detail::gemm_nn<double>(m, n, k, a.data(), b.data(), c.data());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) ref[i * n + j] += a[i * k + p] * b[p * n + j];
    EXPECT_EQ(c, ref);
  }
}

TEST(BatchNorm, HandEvaluatedMean) {
  BatchNorm<double> bn(1);
  batchnorm(TD::from({2, 1, 1, 1}, {1.0, 3.0}), bn, true);
  EXPECT_DOUBLE_EQ(bn.stats.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(bn.stats.variance[0], 1.0);
}

TEST(BatchNorm, ConstantChannelYieldsShift) {
  BatchNorm<double> bn(1);
  bn.shift.values()[0] = 0.25;
  auto y = batchnorm(TD::full({3, 1, 2, 2}, 4.0), bn, true);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(BatchNorm, MatchesTwoPassStatistics) {
  std::mt19937_64 rng(13);
  auto xv = uniform_values(4 * 3 * 9, rng);
  BatchNorm<double> bn(3);
  batchnorm(TD::from({4, 3, 3, 3}, xv), bn, true);
  std::vector<double> mean, var;
  oracle::removal_stats(xv, 4, 3, 9, std::vector<unsigned char>(12, 1), mean, var);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(bn.stats.mean[i], mean[i], 1e-10);
    EXPECT_NEAR(bn.stats.variance[i], var[i], 1e-10);
  }
}

TEST(BatchNorm, RejectsSingleValueBatch) {
  BatchNorm<double> bn(1);
  EXPECT_THROW(batchnorm(TD::zeros({1, 1, 1, 1}), bn, true), ContractError);
}

TEST(Ops, ReluPoolFlatten) {
  auto r = relu(TD::from({2}, {-1.0, 2.5}));
  EXPECT_EQ(r.values()[0], 0.0);
  EXPECT_EQ(r.values()[1], 2.5);
  auto p = global_avg_pool(TD::full({2, 3, 4, 4}, 1.5));
  EXPECT_EQ(p.shape(), (Shape{2, 3}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.5);
  EXPECT_EQ(flatten(TD::zeros({2, 3, 4, 5})).shape(), (Shape{2, 60}));
}

TEST(Autodiff, AnalyticGradients) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  auto y = TD::from({2}, {1.0, 2.0}, true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad()[0], 2.0);
  EXPECT_EQ(y.grad()[1], 4.0);
}

TEST(Autodiff, NonScalarLossRejected) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(x), ContractError);
}

TEST(GradCheck, LinearHarnessSelfTest) {
  std::mt19937_64 rng(17);
  auto rep = finite_difference_check(
      [](const std::vector<TD>& in) { return linear(in[0], in[1], in[2]); },
      {TD::from({3, 4}, uniform_values(12, rng)), TD::from({2, 4}, uniform_values(8, rng)),
       TD::from({2}, uniform_values(2, rng))});
  EXPECT_LT(rep.worst, 1e-6);
}

TEST(GradCheck, ConvOnSmallBatch) {
  std::mt19937_64 rng(19);
  auto rep = finite_difference_check(
      [](const std::vector<TD>& in) { return conv2d(in[0], in[1], 1, 1); },
      {TD::from({2, 2, 5, 5}, uniform_values(100, rng)), TD::from({3, 2, 3, 3}, uniform_values(54, rng))});
  EXPECT_TRUE(rep.passed) << rep.worst;
}

TEST(GradCheck, ZeroInputGivesEqualGradients) {
  auto rep = finite_difference_check([](const std::vector<TD>& in) { return sum(scale(in[0], 0.0)); },
                                     {TD::zeros({4})});
  EXPECT_EQ(rep.worst, 0.0);
}

TEST(GradCheck, EveryPrimitiveOverTwentySeeds) {
  for (const auto& r : run_gradient_suite(20)) {
    EXPECT_TRUE(r.passed()) << r.name << ": " << r.diagnostic;
    EXPECT_EQ(r.seeds, 20u);
  }
}
