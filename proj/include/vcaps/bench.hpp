#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <json.hpp>

#include "vcaps/capsule.hpp"
#include "vcaps/config.hpp"

// Routing cost benchmark: pooled versus all-votes convolutional capsule routing.
namespace vcaps::bench {

struct BenchSpec {
  Dims3 grid{6, 12, 12};  // input capsule grid extents used for timing
  Dims3 rf{3, 3, 3};
  Dims3 stride{1, 2, 2};
  std::size_t types_in = 8, types_out = 8;
  int reps = 5;
  std::uint64_t seed = 1;
  RoutingConfig routing;
};

struct StageTimes {
  double gather = 0, votes = 0, routing = 0;  // median seconds
  double total() const { return gather + votes + routing; }
};

struct BenchReport {
  std::uint64_t naive_votes_per_position = 0;
  std::uint64_t pooled_votes_per_position = 0;
  std::uint64_t positions = 0;
  StageTimes naive, pooled;
  double max_pose_deviation = 0;        // identical-capsule grid
  double max_activation_deviation = 0;

  double reduction() const {
    return pooled_votes_per_position ? static_cast<double>(naive_votes_per_position) /
                                           static_cast<double>(pooled_votes_per_position)
                                     : 0.0;
  }

  nlohmann::json to_json(const BenchSpec& s) const {
    return {{"grid", dims_text(s.grid)},
            {"rf", dims_text(s.rf)},
            {"stride", dims_text(s.stride)},
            {"types_in", s.types_in},
            {"types_out", s.types_out},
            {"reps", s.reps},
            {"naive_votes_per_position", naive_votes_per_position},
            {"pooled_votes_per_position", pooled_votes_per_position},
            {"reduction", reduction()},
            {"output_positions", positions},
            {"naive_seconds", {{"gather", naive.gather}, {"votes", naive.votes}, {"routing", naive.routing}, {"total", naive.total()}}},
            {"pooled_seconds", {{"pool", pooled.gather}, {"votes", pooled.votes}, {"routing", pooled.routing}, {"total", pooled.total()}}},
            {"max_pose_deviation", max_pose_deviation},
            {"max_activation_deviation", max_activation_deviation}};
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename T>
struct Fixture {
  Tape<T> tape;
  CapsuleGrid<T> grid;
  RoutingParams<T> params;
};

// Random grid; with `uniform`, every cell holds the same capsules.
template <typename T>
void fill(Fixture<T>& f, const BenchSpec& s, bool uniform) {
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> n(0.0, 0.5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const std::size_t cells = s.grid[0] * s.grid[1] * s.grid[2];
  Tensor<T> pose(Shape{s.grid[0], s.grid[1], s.grid[2], s.types_in, 4, 4});
  Tensor<T> act(Shape{s.grid[0], s.grid[1], s.grid[2], s.types_in});
  const std::size_t pc = s.types_in * kPoseDim;
  for (std::size_t c = 0; c < cells; ++c) {
    if (uniform && c > 0) {
      std::copy_n(pose.raw(), pc, pose.raw() + c * pc);
      std::copy_n(act.raw(), s.types_in, act.raw() + c * s.types_in);
      continue;
    }
    for (std::size_t i = 0; i < pc; ++i) pose[c * pc + i] = static_cast<T>(n(rng));
    for (std::size_t i = 0; i < s.types_in; ++i) act[c * s.types_in + i] = static_cast<T>(u(rng));
  }
  auto bank = TransformBank<T>::identity_with_noise(s.types_in, s.types_out, 0.1, rng);
  f.grid = {f.tape.constant(pose), f.tape.constant(act)};
  f.params = {f.tape.constant(bank.weights), f.tape.constant(Tensor<T>::zeros({s.types_out})),
              f.tape.constant(Tensor<T>::zeros({s.types_out}))};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Exact per-position vote products for one output position of each scheme.
inline std::pair<std::uint64_t, std::uint64_t> vote_counts(Dims3 rf, std::size_t types_in, std::size_t types_out) {
  BenchSpec s;
  s.grid = rf;
  s.rf = rf;
  s.stride = {1, 1, 1};
  s.types_in = types_in;
  s.types_out = types_out;
  s.routing.iterations = 1;
  detail::Fixture<float> f;
  detail::fill(f, s, false);
  VoteCounter naive, pooled;
  naive_conv_capsule_layer(f.grid, rf, s.stride, f.params, s.routing, &naive);
  conv_capsule_layer(f.grid, rf, s.stride, f.params, s.routing, &pooled);
  return {naive.per_position(), pooled.per_position()};
}

inline BenchReport run(const BenchSpec& s) {
  if (s.reps < 1) throw ConfigError("bench: reps must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (s.rf[a] == 0 || s.rf[a] > s.grid[a]) throw ConfigError("bench: receptive field must fit inside the grid");
  BenchReport r;
  std::tie(r.naive_votes_per_position, r.pooled_votes_per_position) = vote_counts(s.rf, s.types_in, s.types_out);

  detail::Fixture<float> f;
  detail::fill(f, s, false);
  std::vector<double> ng, nv, nr, pg, pv, pr;
  for (int rep = 0; rep < s.reps; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    RoutedCapsules<float> all = gather_windows(f.grid, s.rf, s.stride);
    ng.push_back(detail::seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    Var<float> votes = cast_votes(all.pose, f.params.transforms);
    nv.push_back(detail::seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    em_routing(votes, all.activation, f.params.beta_u, f.params.beta_a, s.routing);
    nr.push_back(detail::seconds_since(t0));

    t0 = std::chrono::steady_clock::now();
    RoutedCapsules<float> pooled = capsule_pool(f.grid, s.rf, s.stride);
    pg.push_back(detail::seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    Var<float> pvotes = cast_votes(pooled.pose, f.params.transforms);
    pv.push_back(detail::seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    em_routing(pvotes, pooled.activation, f.params.beta_u, f.params.beta_a, s.routing);
    pr.push_back(detail::seconds_since(t0));
    r.positions = pooled.activation.shape()[0];
  }
  r.naive = {detail::median(ng), detail::median(nv), detail::median(nr)};
  r.pooled = {detail::median(pg), detail::median(pv), detail::median(pr)};

  detail::Fixture<double> u;
  detail::fill(u, s, true);
  const auto a = conv_capsule_layer(u.grid, s.rf, s.stride, u.params, s.routing);
  const auto b = naive_conv_capsule_layer(u.grid, s.rf, s.stride, u.params, s.routing);
  for (std::size_t i = 0; i < a.pose.size(); ++i)
    r.max_pose_deviation = std::max(r.max_pose_deviation, std::abs(a.pose.value()[i] - b.pose.value()[i]));
  for (std::size_t i = 0; i < a.activation.size(); ++i)
    r.max_activation_deviation =
        std::max(r.max_activation_deviation, std::abs(a.activation.value()[i] - b.activation.value()[i]));
  return r;
}

}  // namespace vcaps::bench
