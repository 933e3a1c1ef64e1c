#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "test_helpers.hpp"
#include "vcaps/capsule.hpp"

using namespace vcaps;
using vcaps::testing::random_tensor;

namespace {

Tensor<double> unit_interval(Shape s, std::mt19937_64& rng, double lo = 0.05, double hi = 0.95) {
  return random_tensor(std::move(s), rng, lo, hi);
}

Tensor<double> identity_bank(std::size_t cin, std::size_t cout) {
  Tensor<double> w(Shape{cin, cout, 4, 4});
  for (std::size_t i = 0; i < cin * cout; ++i)
    for (int d = 0; d < 4; ++d) w[i * 16 + d * 5] = 1.0;
  return w;
}

RoutingParams<double> routing_params(Tape<double>& tape, Tensor<double> bank, std::mt19937_64& rng,
                                     bool random_beta = false) {
  const std::size_t j = bank.extent(1);
  Tensor<double> bu = random_beta ? random_tensor({j}, rng, -0.5, 0.5) : Tensor<double>::zeros({j});
  Tensor<double> ba = random_beta ? random_tensor({j}, rng, -0.5, 0.5) : Tensor<double>::zeros({j});
  return {tape.constant(std::move(bank)), tape.constant(std::move(bu)), tape.constant(std::move(ba))};
}

CapsuleGrid<double> make_grid(Tape<double>& tape, Tensor<double> pose, Tensor<double> act) {
  return {tape.constant(std::move(pose)), tape.constant(std::move(act))};
}

}  // namespace

TEST(PrimaryCapsules, ZeroFeaturesGiveHalfActivation) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  Var<double> features = tape.constant(Tensor<double>::zeros({8, 14, 14, 64}));
  auto grid = primary_capsules(features, tape.constant(random_tensor({3, 5, 5, 64, 8 * 16}, rng)),
                               tape.constant(Tensor<double>::zeros({8 * 16})),
                               tape.constant(random_tensor({3, 5, 5, 64, 8}, rng)),
                               tape.constant(Tensor<double>::zeros({8})));
  EXPECT_EQ(grid.activation.shape(), (Shape{6, 10, 10, 8}));
  EXPECT_EQ(grid.pose.shape(), (Shape{6, 10, 10, 8, 4, 4}));
  for (double a : grid.activation.value().data()) EXPECT_EQ(a, 0.5);
}

TEST(PrimaryCapsules, FullPresetExtents) {
  // 8x28x28 features with a valid 3x9x9 kernel.
  EXPECT_EQ(conv_output_extent({8, 28, 28}, ConvGeometry{{3, 9, 9}}), (Dims3{6, 20, 20}));
}

TEST(PrimaryCapsules, ExtentUnderflowIsConfigError) {
  Tape<double> tape;
  std::mt19937_64 rng(2);
  Var<double> features = tape.constant(Tensor<double>::zeros({2, 4, 4, 3}));
  EXPECT_THROW(primary_capsules(features, tape.constant(random_tensor({3, 5, 5, 3, 16}, rng)),
                                tape.constant(Tensor<double>::zeros({16})),
                                tape.constant(random_tensor({3, 5, 5, 3, 1}, rng)),
                                tape.constant(Tensor<double>::zeros({1}))),
               ConfigError);
}

TEST(CapsulePool, IdenticalWindowReproducesMember) {
  Tape<double> tape;
  std::mt19937_64 rng(3);
  Tensor<double> one = random_tensor({2, 16}, rng);
  Tensor<double> pose(Shape{3, 5, 5, 2, 4, 4}), act(Shape{3, 5, 5, 2});
  for (std::size_t cell = 0; cell < 75; ++cell) {
    std::copy_n(one.raw(), 32, pose.raw() + cell * 32);
    act[cell * 2] = 0.25;
    act[cell * 2 + 1] = 0.75;
  }
  auto pooled = capsule_pool(make_grid(tape, pose, act), {3, 5, 5}, {1, 1, 1});
  ASSERT_EQ(pooled.pose.shape(), (Shape{1, 2, 16}));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(pooled.pose.value()[i], one[i], 1e-13);
  EXPECT_EQ(pooled.activation.value()[0], 0.25);
  EXPECT_EQ(pooled.activation.value()[1], 0.75);
}

TEST(CapsulePool, HalfActiveWindowGivesHalf) {
  Tape<double> tape;
  Tensor<double> act(Shape{1, 2, 2, 1});
  act[0] = act[3] = 1.0;
  auto pooled = capsule_pool(make_grid(tape, Tensor<double>::zeros({1, 2, 2, 1, 4, 4}), act), {1, 2, 2}, {1, 1, 1});
  EXPECT_EQ(pooled.activation.value()[0], 0.5);
}

TEST(CapsulePool, MatchesBruteForceWindowAverage) {
  Tape<double> tape;
  std::mt19937_64 rng(4);
  const Dims3 ext{4, 7, 6}, rf{2, 3, 2}, stride{1, 2, 2};
  const std::size_t C = 3;
  Tensor<double> pose = random_tensor({ext[0], ext[1], ext[2], C, 4, 4}, rng);
  Tensor<double> act = unit_interval({ext[0], ext[1], ext[2], C}, rng);
  auto pooled = capsule_pool(make_grid(tape, pose, act), rf, stride);
  const Dims3 out = conv_output_extent(ext, ConvGeometry{rf, stride});
  ASSERT_EQ(pooled.pose.shape(), (Shape{out[0] * out[1] * out[2], C, 16}));
  double worst = 0.0;
  std::size_t p = 0;
  for (std::size_t ot = 0; ot < out[0]; ++ot)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow, ++p)
        for (std::size_t c = 0; c < C; ++c) {
          double a = 0.0;
          std::array<double, 16> m{};
          for (std::size_t kt = 0; kt < rf[0]; ++kt)
            for (std::size_t kh = 0; kh < rf[1]; ++kh)
              for (std::size_t kw = 0; kw < rf[2]; ++kw) {
                const std::size_t t = ot * stride[0] + kt, h = oh * stride[1] + kh, w = ow * stride[2] + kw;
                a += act.at(t, h, w, c);
                for (std::size_t d = 0; d < 16; ++d) m[d] += pose.at(t, h, w, c, d / 4, d % 4);
              }
          const double vol = static_cast<double>(rf[0] * rf[1] * rf[2]);
          worst = std::max(worst, std::abs(a / vol - pooled.activation.value().at(p, c)));
          for (std::size_t d = 0; d < 16; ++d)
            worst = std::max(worst, std::abs(m[d] / vol - pooled.pose.value().at(p, c, d)));
        }
  EXPECT_LT(worst, 1e-6);
}

TEST(CastVotes, IdentityBankCopiesPoses) {
  Tape<double> tape;
  std::mt19937_64 rng(5);
  Tensor<double> poses = random_tensor({3, 4, 16}, rng);
  Var<double> v = cast_votes(tape.constant(poses), tape.constant(identity_bank(4, 5)));
  ASSERT_EQ(v.shape(), (Shape{3, 4, 5, 16}));
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(v.value().at(p, n, j, d), poses.at(p, n, d));
}

TEST(CastVotes, TransformOfMeanEqualsMeanOfTransforms) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    const std::size_t K = 1 + rng() % 6, C = 1 + rng() % 4, J = 1 + rng() % 4;
    Tensor<double> poses = random_tensor({K, C, 16}, rng, -2.0, 2.0);
    Var<double> bank = tape.constant(random_tensor({C, J, 4, 4}, rng));
    Tensor<double> mean(Shape{1, C, 16});
    for (std::size_t i = 0; i < poses.size(); ++i) mean[i % (C * 16)] += poses[i] / static_cast<double>(K);
    Var<double> of_mean = cast_votes(tape.constant(mean), bank);
    Var<double> all = cast_votes(tape.constant(poses), bank);
    for (std::size_t i = 0; i < of_mean.size(); ++i) {
      double m = 0.0;
      for (std::size_t k = 0; k < K; ++k) m += all.value()[k * of_mean.size() + i];
      EXPECT_NEAR(of_mean.value()[i], m / static_cast<double>(K), 1e-6);
    }
  }
}

TEST(CastVotes, PerPositionCounts) {
  // Pooled: C_L * C_out; naive: C_L * C_out * K_T * K_X * K_Y.
  Tape<double> tape;
  std::mt19937_64 rng(7);
  const std::size_t C = 4, J = 3;
  auto grid = make_grid(tape, random_tensor({4, 6, 6, C, 4, 4}, rng), unit_interval({4, 6, 6, C}, rng));
  auto params = routing_params(tape, random_tensor({C, J, 4, 4}, rng), rng);
  VoteCounter pooled, naive;
  conv_capsule_layer(grid, {3, 3, 3}, {1, 1, 1}, params, RoutingConfig{}, &pooled);
  naive_conv_capsule_layer(grid, {3, 3, 3}, {1, 1, 1}, params, RoutingConfig{}, &naive);
  EXPECT_EQ(pooled.per_position(), C * J);
  EXPECT_EQ(naive.per_position(), C * J * 27);
  EXPECT_EQ(pooled.output_positions, 2u * 4 * 4);
}

TEST(EmRouting, IdenticalVotesAreAFixedPoint) {
  std::mt19937_64 rng(8);
  Tensor<double> v = random_tensor({16}, rng);
  for (int iters : {1, 2, 3, 5}) {
    Tape<double> tape;
    const std::size_t N = 6, J = 3;
    Tensor<double> votes(Shape{1, N, J, 16});
    for (std::size_t i = 0; i < N * J; ++i) std::copy_n(v.raw(), 16, votes.raw() + i * 16);
    RoutingConfig cfg;
    cfg.iterations = iters;
    auto out = em_routing(tape.constant(votes), tape.constant(Tensor<double>::ones({1, N})),
                          tape.constant(Tensor<double>::zeros({J})), tape.constant(Tensor<double>::zeros({J})), cfg);
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(out.pose.value().at(0, j, d), v[d], 1e-12);
  }
}

TEST(EmRouting, SingleInputGroupReturnsItsVotes) {
  std::mt19937_64 rng(9);
  Tensor<double> votes = random_tensor({1, 1, 4, 16}, rng);
  for (int iters : {1, 3, 6}) {
    Tape<double> tape;
    RoutingConfig cfg;
    cfg.iterations = iters;
    auto out = em_routing(tape.constant(votes), tape.constant(Tensor<double>(Shape{1, 1}, 0.7)),
                          tape.constant(Tensor<double>::zeros({4})), tape.constant(Tensor<double>::zeros({4})), cfg);
    for (std::size_t i = 0; i < votes.size(); ++i) EXPECT_NEAR(out.pose.value()[i], votes[i], 1e-9);
  }
}

TEST(EmRouting, InvariantUnderInputPermutation) {
  std::mt19937_64 rng(10);
  for (RoutingCost mode : {RoutingCost::standardized, RoutingCost::literal}) {
    const std::size_t P = 2, N = 7, J = 4;
    Tensor<double> votes = random_tensor({P, N, J, 16}, rng);
    Tensor<double> acts = unit_interval({P, N}, rng);
    Tensor<double> bu = random_tensor({J}, rng, -0.3, 0.3), ba = random_tensor({J}, rng, -0.3, 0.3);
    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> pv(votes.shape()), pa(acts.shape());
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n = 0; n < N; ++n) {
        pa[p * N + n] = acts[p * N + perm[n]];
        std::copy_n(votes.raw() + (p * N + perm[n]) * J * 16, J * 16, pv.raw() + (p * N + n) * J * 16);
      }
    RoutingConfig cfg;
    cfg.cost = mode;
    Tape<double> tape;
    auto a = em_routing(tape.constant(votes), tape.constant(acts), tape.constant(bu), tape.constant(ba), cfg);
    auto b = em_routing(tape.constant(pv), tape.constant(pa), tape.constant(bu), tape.constant(ba), cfg);
    EXPECT_LT(max_abs_diff(a.pose.value(), b.pose.value()), 1e-6);
    EXPECT_LT(max_abs_diff(a.activation.value(), b.activation.value()), 1e-6);
  }
}

TEST(EmRouting, ActivationsStrictlyInsideUnitInterval) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Tape<double> tape;
    const std::size_t P = 1 + rng() % 3, N = 1 + rng() % 20, J = 1 + rng() % 6;
    RoutingConfig cfg;
    cfg.iterations = 1 + static_cast<int>(rng() % 4);
    cfg.inv_temp_end = 1.0 + (rng() % 4);
    auto out = em_routing(tape.constant(random_tensor({P, N, J, 16}, rng, -3, 3)),
                          tape.constant(unit_interval({P, N}, rng, 0.0, 1.0)),
                          tape.constant(random_tensor({J}, rng)), tape.constant(random_tensor({J}, rng)), cfg);
    for (double a : out.activation.value().data()) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
}

TEST(EmRouting, DegenerateZeroActivations) {
  std::mt19937_64 rng(12);
  const std::size_t N = 5, J = 3;
  Tensor<double> ba(Shape{J}, {0.4, -0.2, 1.0});
  RoutingConfig cfg;
  cfg.inv_temp_end = 2.0;
  for (RoutingCost mode : {RoutingCost::standardized, RoutingCost::literal}) {
    cfg.cost = mode;
    Tape<double> tape;
    auto out = em_routing(tape.constant(random_tensor({1, N, J, 16}, rng)), tape.constant(Tensor<double>::zeros({1, N})),
                          tape.constant(Tensor<double>::zeros({J})), tape.constant(ba), cfg);
    for (std::size_t j = 0; j < J; ++j) {
      const double bound = ops::stable_sigmoid(cfg.inv_temp_end * ba[j]);
      EXPECT_LE(out.activation.value()[j], bound + 1e-15);
      for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(out.pose.value().at(0, j, d), 0.0);
    }
  }
}

TEST(EmRouting, DuplicatedInputsLeavePosesUnchanged) {
  std::mt19937_64 rng(13);
  const std::size_t N = 9, J = 4;
  Tensor<double> votes = random_tensor({1, N, J, 16}, rng);
  Tensor<double> acts = unit_interval({1, N}, rng);
  Tensor<double> votes2(Shape{1, 2 * N, J, 16}), acts2(Shape{1, 2 * N});
  for (std::size_t copy = 0; copy < 2; ++copy) {
    std::copy_n(votes.raw(), votes.size(), votes2.raw() + copy * votes.size());
    std::copy_n(acts.raw(), N, acts2.raw() + copy * N);
  }
  Tape<double> tape;
  Var<double> bu = tape.constant(Tensor<double>::zeros({J})), ba = tape.constant(Tensor<double>::zeros({J}));
  auto a = em_routing(tape.constant(votes), tape.constant(acts), bu, ba, RoutingConfig{});
  auto b = em_routing(tape.constant(votes2), tape.constant(acts2), bu, ba, RoutingConfig{});
  EXPECT_LT(max_abs_diff(a.pose.value(), b.pose.value()), 1e-6);
}

TEST(EmRouting, ConfigValidation) {
  RoutingConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.iterations = 3;
  cfg.variance_floor = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EmRouting, InverseTemperatureSchedule) {
  RoutingConfig cfg;
  cfg.inv_temp_start = 1.0;
  cfg.inv_temp_end = 3.0;
  EXPECT_EQ(cfg.inv_temp(0), 1.0);
  EXPECT_EQ(cfg.inv_temp(1), 2.0);
  EXPECT_EQ(cfg.inv_temp(2), 3.0);
}

TEST(CoordinateAddition, SingleCellAddsHalf) {
  Tape<double> tape;
  Tensor<double> votes = Tensor<double>::zeros({1, 2, 3, 16});
  Var<double> out = coordinate_addition(tape.constant(votes), {1, 1, 1}, 2);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.value()[i], (i % 16 >= 13) ? 0.5 : 0.0);
}

TEST(CoordinateAddition, RowOffsetAcrossFullExtent) {
  Tape<double> tape;
  std::mt19937_64 rng(14);
  const Dims3 ext{2, 5, 3};
  const std::size_t C = 2, N = 2 * 5 * 3 * C;
  Tensor<double> v = random_tensor({16}, rng);
  Tensor<double> votes(Shape{1, N, 1, 16});
  for (std::size_t n = 0; n < N; ++n) std::copy_n(v.raw(), 16, votes.raw() + n * 16);
  Var<double> out = coordinate_addition(tape.constant(votes), ext, C);
  // cell (t=1, r=0, c=2) vs (t=1, r=4, c=2), type 1
  const std::size_t n0 = ((1 * 5 + 0) * 3 + 2) * C + 1, n1 = ((1 * 5 + 4) * 3 + 2) * C + 1;
  EXPECT_NEAR(out.value()[n1 * 16 + 14] - out.value()[n0 * 16 + 14], 4.0 / 5.0, 1e-15);
  EXPECT_EQ(out.value()[n1 * 16 + 13], out.value()[n0 * 16 + 13]);
  EXPECT_EQ(out.value()[n1 * 16 + 15], out.value()[n0 * 16 + 15]);
  // Only the last three entries change.
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < 13; ++d) EXPECT_EQ(out.value()[n * 16 + d], v[d]);
}

TEST(ConvCapsuleLayer, UniformGridGivesUniformOutput) {
  Tape<double> tape;
  std::mt19937_64 rng(15);
  const std::size_t C = 3, J = 4;
  Tensor<double> one_pose = random_tensor({C, 16}, rng);
  Tensor<double> one_act = unit_interval({C}, rng);
  Tensor<double> pose(Shape{4, 7, 7, C, 4, 4}), act(Shape{4, 7, 7, C});
  for (std::size_t cell = 0; cell < 4 * 7 * 7; ++cell) {
    std::copy_n(one_pose.raw(), C * 16, pose.raw() + cell * C * 16);
    std::copy_n(one_act.raw(), C, act.raw() + cell * C);
  }
  auto params = routing_params(tape, random_tensor({C, J, 4, 4}, rng), rng, true);
  auto out = conv_capsule_layer(make_grid(tape, pose, act), {3, 3, 3}, {1, 2, 2}, params, RoutingConfig{});
  ASSERT_EQ(out.activation.shape(), (Shape{2, 3, 3, J}));
  const auto& op = out.pose.value();
  const auto& oa = out.activation.value();
  for (std::size_t cell = 1; cell < 18; ++cell) {
    for (std::size_t i = 0; i < J * 16; ++i) EXPECT_EQ(op[cell * J * 16 + i], op[i]);
    for (std::size_t j = 0; j < J; ++j) EXPECT_EQ(oa[cell * J + j], oa[j]);
  }
}

TEST(ConvCapsuleLayer, PooledMatchesNaiveOnBlockConstantGrid) {
  // Non-overlapping windows (rf == stride) over a grid that is constant inside
  // every window: pooled and all-votes routing must coincide.
  for (std::uint64_t seed = 16; seed < 24; ++seed) {
    Tape<double> tape;
    std::mt19937_64 rng(seed);
    const std::size_t C = 3, J = 4;
    const Dims3 rf{2, 3, 3}, out{2, 2, 3};
    const Dims3 ext{rf[0] * out[0], rf[1] * out[1], rf[2] * out[2]};
    Tensor<double> pose(Shape{ext[0], ext[1], ext[2], C, 4, 4}), act(Shape{ext[0], ext[1], ext[2], C});
    Tensor<double> block_pose = random_tensor({out[0], out[1], out[2], C, 16}, rng);
    Tensor<double> block_act = unit_interval({out[0], out[1], out[2], C}, rng);
    for (std::size_t t = 0; t < ext[0]; ++t)
      for (std::size_t h = 0; h < ext[1]; ++h)
        for (std::size_t w = 0; w < ext[2]; ++w) {
          const std::size_t cell = (t * ext[1] + h) * ext[2] + w;
          const std::size_t block = ((t / rf[0]) * out[1] + h / rf[1]) * out[2] + w / rf[2];
          std::copy_n(block_pose.raw() + block * C * 16, C * 16, pose.raw() + cell * C * 16);
          std::copy_n(block_act.raw() + block * C, C, act.raw() + cell * C);
        }
    auto grid = make_grid(tape, pose, act);
    auto params = routing_params(tape, random_tensor({C, J, 4, 4}, rng), rng, true);
    auto pooled = conv_capsule_layer(grid, rf, rf, params, RoutingConfig{});
    auto naive = naive_conv_capsule_layer(grid, rf, rf, params, RoutingConfig{});
    EXPECT_LT(max_abs_diff(pooled.pose.value(), naive.pose.value()), 1e-6) << "seed " << seed;
    EXPECT_LT(max_abs_diff(pooled.activation.value(), naive.activation.value()), 1e-6) << "seed " << seed;
  }
}

TEST(ConvCapsuleLayer, SingletonFieldMatchesNaiveForArbitraryInput) {
  Tape<double> tape;
  std::mt19937_64 rng(17);
  const std::size_t C = 3, J = 2;
  auto grid = make_grid(tape, random_tensor({2, 3, 3, C, 4, 4}, rng), unit_interval({2, 3, 3, C}, rng));
  auto params = routing_params(tape, random_tensor({C, J, 4, 4}, rng), rng, true);
  auto pooled = conv_capsule_layer(grid, {1, 1, 1}, {1, 1, 1}, params, RoutingConfig{});
  auto naive = naive_conv_capsule_layer(grid, {1, 1, 1}, {1, 1, 1}, params, RoutingConfig{});
  EXPECT_LT(max_abs_diff(pooled.pose.value(), naive.pose.value()), 1e-6);
  EXPECT_LT(max_abs_diff(pooled.activation.value(), naive.activation.value()), 1e-6);
}

TEST(ClassCapsules, SingleClass) {
  Tape<double> tape;
  std::mt19937_64 rng(18);
  auto grid = make_grid(tape, random_tensor({2, 2, 2, 3, 4, 4}, rng), unit_interval({2, 2, 2, 3}, rng));
  auto params = routing_params(tape, random_tensor({3, 1, 4, 4}, rng), rng, true);
  auto caps = class_capsules(grid, params, RoutingConfig{});
  ASSERT_EQ(caps.activation.shape(), (Shape{1}));
  EXPECT_GT(caps.activation.value()[0], 0.0);
  EXPECT_LT(caps.activation.value()[0], 1.0);
  EXPECT_EQ(caps.predicted(), 0u);
}

TEST(ClassCapsules, TinyPresetShapes) {
  Tape<double> tape;
  std::mt19937_64 rng(19);
  auto grid = make_grid(tape, random_tensor({4, 4, 4, 8, 4, 4}, rng), unit_interval({4, 4, 4, 8}, rng));
  auto params = routing_params(tape, random_tensor({8, 4, 4, 4}, rng), rng);
  auto caps = class_capsules(grid, params, RoutingConfig{});
  EXPECT_EQ(caps.pose.shape(), (Shape{4, 4, 4}));
  EXPECT_EQ(caps.activation.shape(), (Shape{4}));
}

TEST(ClassCapsules, CoordinateAdditionToggle) {
  Tape<double> tape;
  std::mt19937_64 rng(20);
  auto grid = make_grid(tape, random_tensor({2, 2, 2, 2, 4, 4}, rng), unit_interval({2, 2, 2, 2}, rng));
  auto params = routing_params(tape, identity_bank(2, 3), rng);
  auto with = class_capsules(grid, params, RoutingConfig{}, true);
  auto without = class_capsules(grid, params, RoutingConfig{}, false);
  // Entries 0..12 are untouched by coordinate addition; only routing weights may shift.
  EXPECT_GT(max_abs_diff(with.pose.value(), without.pose.value()), 0.0);
}

TEST(MaskPoses, TrainingKeepsTargetBlock) {
  Tape<double> tape;
  std::mt19937_64 rng(21);
  Tensor<double> pose = random_tensor({4, 4, 4}, rng, 0.1, 1.0);
  ClassCapsules<double> caps{tape.constant(pose), tape.constant(Tensor<double>(Shape{4}, {0.1, 0.9, 0.2, 0.3}))};
  Var<double> m = mask_poses(caps, std::size_t{2});
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.value()[i] != 0.0) {
      ++nonzero;
      EXPECT_EQ(i / 16, 2u);
    }
  }
  EXPECT_EQ(nonzero, 16u);
}

TEST(MaskPoses, EvalKeepsArgmaxAndMatchesTargetMask) {
  Tape<double> tape;
  std::mt19937_64 rng(22);
  Tensor<double> pose = random_tensor({3, 4, 4}, rng, 0.1, 1.0);
  ClassCapsules<double> caps{tape.constant(pose), tape.constant(Tensor<double>(Shape{3}, {0.1, 0.9, 0.3}))};
  Var<double> eval = mask_poses(caps, std::nullopt);
  for (std::size_t i = 0; i < eval.size(); ++i) EXPECT_EQ(eval.value()[i] != 0.0, i / 16 == 1);
  EXPECT_EQ(eval.value(), mask_poses(caps, std::size_t{1}).value());
  EXPECT_THROW(mask_poses(caps, std::size_t{3}), UsageError);
}

// ---- gradients -------------------------------------------------------------

TEST(CapsuleGradients, PoolAndGather) {
  std::mt19937_64 rng(30);
  Tensor<double> pose = random_tensor({3, 4, 4, 2, 4, 4}, rng);
  Tensor<double> act = unit_interval({3, 4, 4, 2}, rng);
  Tensor<double> wp = random_tensor({2 * 2 * 2, 2, 16}, rng);
  auto fn = [&](Tape<double>& t, const Var<double>& p) {
    CapsuleGrid<double> g{p, t.constant(act)};
    auto pooled = capsule_pool(g, {2, 3, 3}, {1, 1, 1});
    auto all = gather_windows(g, {2, 3, 3}, {1, 1, 1});
    return ops::add(ops::sum(ops::mul(pooled.pose, t.constant(wp))), ops::mean(ops::sigmoid(all.pose)));
  };
  EXPECT_LT(grad_check(fn, pose).max_rel_error, 1e-4);
}

TEST(CapsuleGradients, CastVotesAndCoordinateAddition) {
  std::mt19937_64 rng(31);
  Tensor<double> poses = random_tensor({1, 2 * 2 * 1 * 3, 16}, rng);
  Tensor<double> bank = random_tensor({3, 2, 4, 4}, rng);
  Tensor<double> w = random_tensor({1, 12, 2, 16}, rng);
  auto wrt_poses = [&](Tape<double>& t, const Var<double>& p) {
    Var<double> v = coordinate_addition(cast_votes(p, t.constant(bank)), {2, 2, 1}, 3);
    return ops::sum(ops::mul(ops::sigmoid(v), t.constant(w)));
  };
  auto wrt_bank = [&](Tape<double>& t, const Var<double>& b) {
    Var<double> v = coordinate_addition(cast_votes(t.constant(poses), b), {2, 2, 1}, 3);
    return ops::sum(ops::mul(ops::sigmoid(v), t.constant(w)));
  };
  EXPECT_LT(grad_check(wrt_poses, poses).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(wrt_bank, bank).max_rel_error, 1e-4);
}

class EmRoutingGradients : public ::testing::TestWithParam<std::tuple<RoutingCost, int>> {};

TEST_P(EmRoutingGradients, AllInputs) {
  const auto [mode, iters] = GetParam();
  std::mt19937_64 rng(40 + iters);
  const std::size_t P = 2, N = 5, J = 3;
  Tensor<double> votes = random_tensor({P, N, J, 16}, rng);
  Tensor<double> acts = unit_interval({P, N}, rng, 0.2, 0.9);
  Tensor<double> bu = random_tensor({J}, rng, -0.3, 0.3), ba = random_tensor({J}, rng, -0.3, 0.3);
  Tensor<double> wp = random_tensor({P, J, 16}, rng), wa = random_tensor({P, J}, rng);
  RoutingConfig cfg;
  cfg.cost = mode;
  cfg.iterations = iters;
  cfg.inv_temp_start = 1.0;
  cfg.inv_temp_end = 2.0;
  // Keep the literal-mode logits in a range where the logistic is not flat.
  if (mode == RoutingCost::literal) cfg.variance_floor = 0.05;
  auto objective = [&](Tape<double>& t, Var<double> v, Var<double> a, Var<double> u, Var<double> b) {
    auto out = em_routing(v, a, u, b, cfg);
    return ops::add(ops::sum(ops::mul(out.pose, t.constant(wp))), ops::sum(ops::mul(out.activation, t.constant(wa))));
  };
  auto fv = [&](Tape<double>& t, const Var<double>& x) {
    return objective(t, x, t.constant(acts), t.constant(bu), t.constant(ba));
  };
  auto fa = [&](Tape<double>& t, const Var<double>& x) {
    return objective(t, t.constant(votes), x, t.constant(bu), t.constant(ba));
  };
  auto fu = [&](Tape<double>& t, const Var<double>& x) {
    return objective(t, t.constant(votes), t.constant(acts), x, t.constant(ba));
  };
  auto fb = [&](Tape<double>& t, const Var<double>& x) {
    return objective(t, t.constant(votes), t.constant(acts), t.constant(bu), x);
  };
  EXPECT_LT(grad_check(fv, votes).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(fa, acts).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(fu, bu).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(fb, ba).max_rel_error, 1e-4);
}

TEST_P(EmRoutingGradients, ActivationOnlyObjective) {
  // Only the activation output feeds the loss; its gradient must still flow.
  const auto [mode, iters] = GetParam();
  std::mt19937_64 rng(50 + iters);
  Tensor<double> votes = random_tensor({1, 4, 3, 16}, rng);
  RoutingConfig cfg;
  cfg.cost = mode;
  cfg.iterations = iters;
  if (mode == RoutingCost::literal) cfg.variance_floor = 0.05;
  auto fn = [&](Tape<double>& t, const Var<double>& v) {
    auto out = em_routing(v, t.constant(Tensor<double>(Shape{1, 4}, 0.6)), t.constant(Tensor<double>::zeros({3})),
                          t.constant(Tensor<double>(Shape{3}, {0.1, -0.1, 0.2})), cfg);
    return ops::sum(ops::mul(out.activation, t.constant(Tensor<double>(Shape{1, 3}, {1.0, -2.0, 0.5}))));
  };
  EXPECT_LT(grad_check(fn, votes).max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Modes, EmRoutingGradients,
                         ::testing::Combine(::testing::Values(RoutingCost::standardized, RoutingCost::literal),
                                            ::testing::Values(1, 3)));

TEST(CapsuleGradients, ConvAndClassCapsuleStack) {
  std::mt19937_64 rng(60);
  const std::size_t C = 2, J = 3, N = 2;
  Tensor<double> pose = random_tensor({3, 5, 5, C, 4, 4}, rng);
  Tensor<double> act = unit_interval({3, 5, 5, C}, rng, 0.2, 0.9);
  Tensor<double> bank1 = random_tensor({C, J, 4, 4}, rng);
  Tensor<double> bank2 = random_tensor({J, N, 4, 4}, rng);
  auto fn = [&](Tape<double>& t, const Var<double>& b1) {
    CapsuleGrid<double> g{t.constant(pose), t.constant(act)};
    RoutingParams<double> p1{b1, t.constant(Tensor<double>::zeros({J})), t.constant(Tensor<double>::zeros({J}))};
    RoutingParams<double> p2{t.constant(bank2), t.constant(Tensor<double>::zeros({N})),
                             t.constant(Tensor<double>(Shape{N}, {0.1, -0.1}))};
    auto mid = conv_capsule_layer(g, {3, 3, 3}, {1, 2, 2}, p1, RoutingConfig{});
    auto cls = class_capsules(mid, p2, RoutingConfig{});
    Var<double> masked = mask_poses(cls, std::size_t{1});
    return ops::add(ops::sum(cls.activation), ops::scale(ops::sum(ops::sigmoid(masked)), 0.1));
  };
  EXPECT_LT(grad_check(fn, bank1).max_rel_error, 1e-4);
}
