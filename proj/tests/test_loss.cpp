#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "test_helpers.hpp"
#include "vcaps/loss.hpp"
#include "vcaps/reference.hpp"

using namespace vcaps;
using vcaps::testing::random_tensor;

namespace {

double spread(const std::vector<double>& a, std::size_t t, double m) {
  Tape<double> tape;
  return spread_loss(tape.constant(Tensor<double>(Shape{a.size()}, a)), t, m).value()[0];
}

double localization(const Tensor<double>& f, const Tensor<double>& y) {
  Tape<double> tape;
  return localization_loss(tape.constant(f), y).value()[0];
}

Tensor<double> random_mask(Shape s, std::mt19937_64& rng) {
  Tensor<double> m(std::move(s));
  for (double& v : m.data()) v = static_cast<double>(rng() % 2);
  return m;
}

}  // namespace

TEST(SpreadLoss, SatisfiedMarginsGiveZero) {
  EXPECT_EQ(spread({1.0, 0.0, 0.0, 0.0}, 0, 0.9), 0.0);
}

TEST(SpreadLoss, EqualPairAtSmallestMargin) {
  EXPECT_NEAR(spread({0.5, 0.5}, 0, 0.2), 0.04, 1e-15);
}

TEST(SpreadLoss, MatchesDirectSummation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(24);
    for (double& v : a) v = u(rng);
    const std::size_t t = rng() % 24;
    const double m = 0.2 + 0.7 * u(rng);
    EXPECT_NEAR(spread(a, t, m), reference::spread_loss(a, t, m), 1e-9);
  }
}

TEST(SpreadLoss, NonNegativeAndZeroExactlyWhenMarginsHold) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(5);
    for (double& v : a) v = u(rng);
    const std::size_t t = rng() % 5;
    const double m = 0.2 + 0.7 * u(rng);
    const double l = spread(a, t, m);
    bool all_hold = true;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (i != t && a[t] - a[i] < m) all_hold = false;
    EXPECT_GE(l, 0.0);
    EXPECT_EQ(l == 0.0, all_hold);
  }
}

TEST(SpreadLoss, InvariantUnderPermutingNonTargets) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> a(8);
  for (double& v : a) v = u(rng);
  const double base = spread(a, 3, 0.6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> b = a;
    std::vector<double> rest;
    for (std::size_t i = 0; i < b.size(); ++i)
      if (i != 3) rest.push_back(b[i]);
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0, r = 0; i < b.size(); ++i)
      if (i != 3) b[i] = rest[r++];
    EXPECT_NEAR(spread(b, 3, 0.6), base, 1e-15);
  }
}

TEST(SpreadLoss, TargetOutOfRange) {
  Tape<double> tape;
  EXPECT_THROW(spread_loss(tape.constant(Tensor<double>::zeros({4})), 4, 0.5), UsageError);
}

TEST(LocalizationLoss, ZeroLogitsGiveLn2) {
  std::mt19937_64 rng(4);
  const Tensor<double> y = random_mask({4, 5, 5}, rng);
  EXPECT_NEAR(localization(Tensor<double>::zeros({4, 5, 5}), y), std::numbers::ln2, 1e-12);
}

TEST(LocalizationLoss, SaturatedCorrectLogitsApproachZero) {
  std::mt19937_64 rng(5);
  const Tensor<double> y = random_mask({2, 4, 4}, rng);
  for (double big : {20.0, 200.0, 2000.0}) {
    Tensor<double> f(y.shape());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = y[i] > 0 ? big : -big;
    const double l = localization(f, y);
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 3e-9);
  }
}

TEST(LocalizationLoss, MatchesDirectEvaluation) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> f = random_tensor({4, 5, 5}, rng, -8.0, 8.0);
    const Tensor<double> y = random_mask({4, 5, 5}, rng);
    const std::vector<double> fv(f.data().begin(), f.data().end()), yv(y.data().begin(), y.data().end());
    EXPECT_NEAR(localization(f, y), reference::localization_loss(fv, yv), 1e-9);
  }
}

TEST(LocalizationLoss, GradientSignsFollowTarget) {
  std::mt19937_64 rng(7);
  const Tensor<double> f0 = random_tensor({3, 4, 4}, rng, -5.0, 5.0);
  const Tensor<double> y = random_mask({3, 4, 4}, rng);
  Tape<double> tape;
  Var<double> f = tape.variable(f0);
  tape.backward(localization_loss(f, y));
  const Tensor<double> g = tape.grad(f);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (y[i] > 0) EXPECT_LT(g[i], 0.0);
    else EXPECT_GT(g[i], 0.0);
  }
}

TEST(LocalizationLoss, ExtremeLogitsStayFinite) {
  Tensor<double> f(Shape{4}, {-1e4, 1e4, -750.0, 750.0});
  Tensor<double> y(Shape{4}, {1.0, 0.0, 1.0, 0.0});
  const double l = localization(f, y);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, (1e4 + 1e4 + 750.0 + 750.0) / 4.0, 1e-9);
}

TEST(LossGradients, FiniteDifferences) {
  std::mt19937_64 rng(8);
  const Tensor<double> y = random_mask({2, 3, 3}, rng);
  const Tensor<double> target_rgb = random_tensor({2, 3, 3}, rng, 0.0, 1.0);
  auto loc = [&](Tape<double>&, const Var<double>& f) { return localization_loss(f, y); };
  auto rec = [&](Tape<double>&, const Var<double>& f) { return reconstruction_loss(f, target_rgb); };
  EXPECT_LT(grad_check(loc, random_tensor({2, 3, 3}, rng, -4.0, 4.0)).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(rec, random_tensor({2, 3, 3}, rng)).max_rel_error, 1e-4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t = rng() % 6;
    auto spread_fn = [&](Tape<double>&, const Var<double>& a) { return spread_loss(a, t, 0.7); };
    EXPECT_LT(grad_check(spread_fn, random_tensor({6}, rng, 0.0, 1.0)).max_rel_error, 1e-4);
  }
}

TEST(TotalLoss, WeightedSum) {
  Tape<double> tape;
  LossComponents<double> c{tape.constant(Tensor<double>::scalar(1.0)), tape.constant(Tensor<double>::scalar(100.0)),
                           std::nullopt};
  EXPECT_NEAR(total_loss(c, LossWeights{}).value()[0], 1.02, 1e-15);
  LossWeights zero;
  zero.lambda = 0.0;
  EXPECT_EQ(total_loss(c, zero).value()[0], 1.0);
}

TEST(TotalLoss, ReconstructionTerm) {
  Tape<double> tape;
  LossComponents<double> c{tape.constant(Tensor<double>::scalar(1.0)), tape.constant(Tensor<double>::scalar(10.0)),
                           tape.constant(Tensor<double>::scalar(50.0))};
  LossWeights w;
  w.use_reconstruction = true;
  EXPECT_NEAR(total_loss(c, w).value()[0], 1.0 + 0.002 + 0.01, 1e-15);
}

TEST(TotalLoss, LocalizationOnlyOmitsClassification) {
  Tape<double> tape;
  LossComponents<double> c{std::nullopt, tape.constant(Tensor<double>::scalar(100.0)), std::nullopt};
  LossWeights w;
  w.classification = false;
  EXPECT_NEAR(total_loss(c, w).value()[0], 0.02, 1e-15);
}

TEST(TotalLoss, MissingComponentIsUsageError) {
  Tape<double> tape;
  LossComponents<double> c{tape.constant(Tensor<double>::scalar(1.0)), std::nullopt, std::nullopt};
  EXPECT_THROW(total_loss(c, LossWeights{}), UsageError);
  LossWeights w;
  w.use_reconstruction = true;
  w.localization = false;
  EXPECT_THROW(total_loss(c, w), UsageError);
}

TEST(MarginSchedule, Endpoints) {
  MarginSchedule s{0.2, 0.9, 1000};
  EXPECT_EQ(s.margin(0), 0.2);
  EXPECT_EQ(s.margin(1000), 0.9);
  EXPECT_EQ(s.margin(5000), 0.9);
  EXPECT_NEAR(s.margin(500), 0.55, 1e-15);
}

TEST(MarginSchedule, NondecreasingAndClamped) {
  MarginSchedule s{0.2, 0.9, 37};
  double prev = s.margin(0);
  for (std::uint64_t step = 1; step < 100; ++step) {
    const double m = s.margin(step);
    EXPECT_GE(m, prev);
    EXPECT_GE(m, 0.2);
    EXPECT_LE(m, 0.9);
    prev = m;
  }
}

TEST(MarginSchedule, Validation) {
  EXPECT_THROW((MarginSchedule{0.2, 0.9, 0}).validate(), ConfigError);
  EXPECT_THROW((MarginSchedule{0.9, 0.2, 10}).validate(), ConfigError);
}
