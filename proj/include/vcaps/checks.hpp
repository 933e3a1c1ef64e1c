#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vcaps/bench.hpp"
#include "vcaps/loss.hpp"
#include "vcaps/metrics.hpp"
#include "vcaps/net.hpp"
#include "vcaps/reference.hpp"

// Invariant suite shared by `vcaps selfcheck` and the acceptance binary.
// Each check is self-contained and deterministic.
namespace vcaps::checks {

struct CheckResult {
  int criterion = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

using Check = std::function<CheckResult()>;

namespace detail {

inline Tensor<double> uniform(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// Worst relative error over a list of (label, report) pairs against `tol`.
struct Worst {
  double error = 0;
  std::string where;
  void add(const std::string& label, const GradCheckReport& r) {
    if (r.max_rel_error >= error) error = r.max_rel_error, where = label;
  }
  CheckResult result(int criterion, std::string name, double tol) const {
    return {criterion, std::move(name), error < tol,
            "max rel error " + fmt(error) + " (" + where + "), tolerance " + fmt(tol), 0};
  }
};

inline NetworkConfig mini_network() {
  NetworkConfig c = NetworkConfig::tiny();
  c.preset = "custom";
  c.input = {4, 8, 8};
  c.conv = {{4, {1, 1, 1}}, {4, {1, 2, 2}}};
  c.caps1_types = 2;
  c.caps1_kernel = {2, 2, 2};
  c.caps2_types = 2;
  c.caps2_kernel = {2, 2, 2};
  c.caps2_stride = {1, 1, 1};
  c.decoder_narrow = 2;
  c.decoder_wide = 3;
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradients.

inline CheckResult primitive_gradients() {
  using detail::uniform;
  std::mt19937_64 rng(101);
  detail::Worst w;
  {
    const ConvGeometry g{{2, 3, 3}, {1, 2, 2}, Padding3{{1, 0, 1}, {0, 1, 1}}};
    const Tensor<double> k = uniform({2, 3, 3, 2, 3}, rng), x = uniform({3, 5, 5, 2}, rng);
    const Tensor<double> wt = uniform(conv3d_forward(x, k, g).shape(), rng);
    w.add("conv3d/input", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::mul(ops::conv3d(v, t.constant(k), g), t.constant(wt)));
          }, x));
    w.add("conv3d/kernel", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::mul(ops::conv3d(t.constant(x), v, g), t.constant(wt)));
          }, k));
  }
  {
    const ConvGeometry g{{3, 4, 4}, {1, 2, 2}, Padding3::valid()};
    const Tensor<double> k = uniform({3, 4, 4, 2, 3}, rng), y = uniform({2, 3, 3, 3}, rng);
    const Tensor<double> wt = uniform(conv3d_transposed_forward(y, k, g).shape(), rng);
    w.add("conv3d_transposed/input", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::mul(ops::conv3d_transposed(v, t.constant(k), g), t.constant(wt)));
          }, y));
    w.add("conv3d_transposed/kernel", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::mul(ops::conv3d_transposed(t.constant(y), v, g), t.constant(wt)));
          }, k));
  }
  {
    const Tensor<double> a = uniform({3, 4}, rng), b = uniform({4, 2}, rng), bias = uniform({2}, rng);
    w.add("matmul", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::sigmoid(ops::matmul(v, t.constant(b))));
          }, a));
    w.add("linear", grad_check([&](Tape<double>& t, const Var<double>& v) {
            return ops::sum(ops::sigmoid(ops::linear(t.constant(Tensor<double>(Shape{4}, {0.3, -0.2, 0.9, 0.1})), v,
                                                     t.constant(bias))));
          }, b));
    w.add("add_bias/concat", grad_check([&](Tape<double>& t, const Var<double>& v) {
            Var<double> y = ops::add_bias(ops::matmul(t.constant(a), t.constant(b)), v);
            return ops::mean(ops::sigmoid(ops::concat_last(y, ops::relu(y))));
          }, bias));
  }
  {
    Tensor<double> x = uniform({4, 3}, rng);
    for (double& v : x.data()) v += v > 0 ? 0.1 : -0.1;  // away from the relu kink
    w.add("pointwise/reductions", grad_check([](Tape<double>&, const Var<double>& v) {
            Var<double> s = ops::sigmoid(ops::scale(v, 2.0));
            return ops::add(ops::mean(ops::mul(ops::relu(v), s)), ops::sum(ops::reshape(s, Shape{12})));
          }, x));
  }
  for (RoutingCost cost : {RoutingCost::standardized, RoutingCost::literal}) {
    const Tensor<double> votes = uniform({2, 5, 3, 16}, rng), acts = uniform({2, 5}, rng, 0.2, 0.9);
    const Tensor<double> bu = uniform({3}, rng, -0.3, 0.3), ba = uniform({3}, rng, -0.3, 0.3);
    const Tensor<double> wp = uniform({2, 3, 16}, rng), wa = uniform({2, 3}, rng);
    RoutingConfig cfg;
    cfg.cost = cost;
    cfg.inv_temp_end = 2.0;
    if (cost == RoutingCost::literal) cfg.variance_floor = 0.05;
    const std::string tag = cost == RoutingCost::literal ? "em_routing(literal)" : "em_routing";
    auto objective = [&](Tape<double>& t, Var<double> v, Var<double> a, Var<double> u, Var<double> b) {
      auto out = em_routing(v, a, u, b, cfg);
      return ops::add(ops::sum(ops::mul(out.pose, t.constant(wp))),
                      ops::sum(ops::mul(out.activation, t.constant(wa))));
    };
    w.add(tag + "/votes", grad_check([&](Tape<double>& t, const Var<double>& x) {
            return objective(t, x, t.constant(acts), t.constant(bu), t.constant(ba));
          }, votes));
    w.add(tag + "/activations", grad_check([&](Tape<double>& t, const Var<double>& x) {
            return objective(t, t.constant(votes), x, t.constant(bu), t.constant(ba));
          }, acts));
    w.add(tag + "/beta_u", grad_check([&](Tape<double>& t, const Var<double>& x) {
            return objective(t, t.constant(votes), t.constant(acts), x, t.constant(ba));
          }, bu));
    w.add(tag + "/beta_a", grad_check([&](Tape<double>& t, const Var<double>& x) {
            return objective(t, t.constant(votes), t.constant(acts), t.constant(bu), x);
          }, ba));
  }
  {
    const Tensor<double> pose = uniform({3, 4, 4, 2, 4, 4}, rng), act = uniform({3, 4, 4, 2}, rng, 0.05, 0.95);
    const Tensor<double> wp = uniform({8, 2, 16}, rng), bank = uniform({2, 3, 4, 4}, rng);
    w.add("capsule_pool/gather", grad_check([&](Tape<double>& t, const Var<double>& p) {
            CapsuleGrid<double> g{p, t.constant(act)};
            auto pooled = capsule_pool(g, {2, 3, 3}, {1, 1, 1});
            auto all = gather_windows(g, {2, 3, 3}, {1, 1, 1});
            return ops::add(ops::sum(ops::mul(pooled.pose, t.constant(wp))), ops::mean(ops::sigmoid(all.pose)));
          }, pose));
    const Tensor<double> poses = uniform({1, 12, 16}, rng), wv = uniform({1, 12, 3, 16}, rng);
    w.add("cast_votes/coordinate_addition", grad_check([&](Tape<double>& t, const Var<double>& b) {
            Var<double> v = coordinate_addition(cast_votes(t.constant(poses), b), {2, 3, 1}, 2);
            return ops::sum(ops::mul(ops::sigmoid(v), t.constant(wv)));
          }, bank));
  }
  {
    std::vector<double> a(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
      // Resample until every hinge is at least 10 steps from its kink.
      while (true) {
        for (double& v : a) v = u(rng);
        bool ok = true;
        for (std::size_t i = 1; i < a.size(); ++i) ok &= std::abs(0.5 - (a[0] - a[i])) > 1e-3;
        if (ok) break;
      }
      w.add("spread_loss", grad_check([](Tape<double>&, const Var<double>& v) { return spread_loss(v, 0, 0.5); },
                                      Tensor<double>(Shape{6}, a)));
    }
    Tensor<double> mask(Shape{2, 3, 3});
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<double>(i % 2);
    w.add("localization_loss", grad_check([&](Tape<double>&, const Var<double>& v) {
            return localization_loss(v, mask);
          }, uniform({2, 3, 3}, rng, -4.0, 4.0)));
    w.add("reconstruction_loss", grad_check([&](Tape<double>&, const Var<double>& v) {
            return reconstruction_loss(v, mask);
          }, uniform({2, 3, 3}, rng)));
  }
  return w.result(1, "gradients.primitives", 1e-4);
}

// Full network loss against central differences on `n_coords` random
// parameter coordinates spread over all parameter tensors.
inline CheckResult end_to_end_gradient(const NetworkConfig& cfg, std::size_t n_coords, std::uint64_t seed) {
  const NetworkPlan plan = plan_network(cfg);
  const ParameterStore<double> ps = build<double>(cfg, seed);
  std::mt19937_64 rng(seed);
  const Shape in{cfg.input[0], cfg.input[1], cfg.input[2], cfg.input_channels};
  const Tensor<double> video = detail::uniform(in, rng, 0.0, 1.0);
  Tensor<double> mask(Shape{cfg.input[0], cfg.input[1], cfg.input[2]});
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % cfg.input[2]) < cfg.input[2] / 2 ? 1.0 : 0.0;
  const std::size_t target = 1 % cfg.classes;
  std::map<std::string, std::vector<std::size_t>> picks;
  std::uniform_int_distribution<std::size_t> which(0, ps.size() - 1);
  for (std::size_t k = 0; k < n_coords; ++k) {
    const std::string& name = ps.names()[which(rng)];
    picks[name].push_back(std::uniform_int_distribution<std::size_t>(0, ps.get(name).size() - 1)(rng));
  }
  detail::Worst w;
  for (const auto& [name, coords] : picks) {
    auto fn = [&, &name = name](Tape<double>& tape, const Var<double>& x) {
      BoundParams<double> bp(ps, tape, false);
      bp.rebind(name, x);
      auto out = forward(cfg, plan, bp, tape, video, std::optional<std::size_t>{target});
      LossComponents<double> c{spread_loss(out.class_activations, target, 0.5), localization_loss(out.loc_logits, mask),
                               std::nullopt};
      if (out.reconstruction) c.reconstruction = reconstruction_loss(*out.reconstruction, video);
      return total_loss(c, cfg.loss);
    };
    w.add(name, grad_check(fn, ps.get(name), 1e-5, coords));
  }
  return w.result(1, "gradients.end_to_end(" + cfg.preset + ", " + std::to_string(n_coords) + " coords)", 1e-3);
}

// ---------------------------------------------------------------------------
// Routing equivalence and vote counts.

inline CheckResult routing_identical_windows() {
  double dev = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    bench::BenchSpec s;
    s.grid = {4, 7, 7};
    s.rf = {3, 3, 3};
    s.stride = {1, 2, 2};
    s.types_in = 4;
    s.types_out = 3;
    s.seed = seed;
    bench::detail::Fixture<double> f;
    bench::detail::fill(f, s, true);
    const auto a = conv_capsule_layer(f.grid, s.rf, s.stride, f.params, s.routing);
    const auto b = naive_conv_capsule_layer(f.grid, s.rf, s.stride, f.params, s.routing);
    dev = std::max({dev, max_abs_diff(a.pose.value(), b.pose.value()),
                    max_abs_diff(a.activation.value(), b.activation.value())});
  }
  return {2, "routing.identical_windows", dev < 1e-5, "max deviation " + detail::fmt(dev) + ", tolerance 1e-05", 0};
}

inline CheckResult routing_singleton_field() {
  double dev = 0;
  for (std::uint64_t seed : {4, 5, 6}) {
    bench::BenchSpec s;
    s.grid = {3, 5, 5};
    s.rf = {1, 1, 1};
    s.stride = {1, 1, 1};
    s.types_in = 3;
    s.types_out = 4;
    s.seed = seed;
    bench::detail::Fixture<double> f;
    bench::detail::fill(f, s, false);
    const auto a = conv_capsule_layer(f.grid, s.rf, s.stride, f.params, s.routing);
    const auto b = naive_conv_capsule_layer(f.grid, s.rf, s.stride, f.params, s.routing);
    dev = std::max({dev, max_abs_diff(a.pose.value(), b.pose.value()),
                    max_abs_diff(a.activation.value(), b.activation.value())});
  }
  return {2, "routing.singleton_field", dev < 1e-5, "max deviation " + detail::fmt(dev) + " on random inputs", 0};
}

inline CheckResult vote_counts(const std::string& name, Dims3 rf, std::size_t cin, std::size_t cout) {
  const auto [naive, pooled] = bench::vote_counts(rf, cin, cout);
  const std::uint64_t want_naive = cin * cout * rf[0] * rf[1] * rf[2], want_pooled = cin * cout;
  return {3, name, naive == want_naive && pooled == want_pooled,
          "naive " + std::to_string(naive) + " (expect " + std::to_string(want_naive) + "), pooled " +
              std::to_string(pooled) + " (expect " + std::to_string(want_pooled) + ")",
          0};
}

// ---------------------------------------------------------------------------
// Loss identities.

inline CheckResult spread_oracle() {
  std::mt19937_64 rng(201);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(1 + rng() % 24);
    for (double& v : a) v = u(rng);
    const std::size_t t = rng() % a.size();
    const double m = 0.2 + 0.7 * u(rng);
    Tape<double> tape;
    const double got = spread_loss(tape.constant(Tensor<double>(Shape{a.size()}, a)), t, m).value()[0];
    worst = std::max(worst, std::abs(got - reference::spread_loss(a, t, m)));
  }
  return {4, "loss.spread_oracle", worst < 1e-9, "max abs difference " + detail::fmt(worst), 0};
}

inline CheckResult localization_oracle() {
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{1 + rng() % 4, 1 + rng() % 6, 1 + rng() % 6};
    const Tensor<double> f = detail::uniform(s, rng, -8.0, 8.0);
    Tensor<double> y(s);
    for (double& v : y.data()) v = static_cast<double>(rng() % 2);
    Tape<double> tape;
    const double got = localization_loss(tape.constant(f), y).value()[0];
    std::vector<double> fv(f.data().begin(), f.data().end()), yv(y.data().begin(), y.data().end());
    worst = std::max(worst, std::abs(got - reference::localization_loss(fv, yv)));
  }
  return {4, "loss.localization_oracle", worst < 1e-9, "max abs difference " + detail::fmt(worst), 0};
}

inline CheckResult localization_zero_logits() {
  std::mt19937_64 rng(203);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s{1 + rng() % 8, 1 + rng() % 28, 1 + rng() % 28};
    Tensor<double> y(s);
    for (double& v : y.data()) v = static_cast<double>(rng() % 2);
    Tape<double> tape;
    const double got = localization_loss(tape.constant(Tensor<double>::zeros(s)), y).value()[0];
    worst = std::max(worst, std::abs(got - std::numbers::ln2));
  }
  return {4, "loss.zero_logits_ln2", worst < 1e-12, "max |L - ln 2| " + detail::fmt(worst), 0};
}

inline CheckResult margin_endpoints() {
  const MarginSchedule s{0.2, 0.9, 1000};
  const bool ok = s.margin(0) == 0.2 && s.margin(1000) == 0.9 && s.margin(5000) == 0.9;
  return {4, "loss.margin_endpoints", ok,
          "m(0) = " + detail::fmt(s.margin(0)) + ", m(end) = " + detail::fmt(s.margin(1000)), 0};
}

// ---------------------------------------------------------------------------
// Metrics.

inline std::pair<std::vector<metrics::Detection>, std::vector<metrics::GroundTruth>> split_toy(
    const std::vector<reference::ToyVideo>& toy) {
  std::vector<metrics::Detection> d;
  std::vector<metrics::GroundTruth> g;
  for (const auto& x : toy) {
    d.push_back({x.id, x.pred_class, x.confidence, x.pred});
    g.push_back({x.id, x.gt_class, x.gt});
  }
  return {d, g};
}

inline CheckResult metric_oracle(std::size_t n_sets) {
  std::size_t compared = 0, mismatched = 0;
  for (std::uint64_t seed = 10; seed < 10 + n_sets; ++seed) {
    const auto toy = reference::toy_set(seed);
    const auto [d, g] = split_toy(toy);
    for (double a : {0.1, 0.2, 0.3, 0.5, 0.75}) {
      compared += 2;
      mismatched += metrics::frame_map(d, g, 4, a).mean != reference::brute_force_map(toy, 4, a, true);
      mismatched += metrics::video_map(d, g, 4, a).mean != reference::brute_force_map(toy, 4, a, false);
    }
  }
  return {5, "metrics.brute_force_equality", mismatched == 0,
          std::to_string(compared - mismatched) + "/" + std::to_string(compared) + " exactly equal", 0};
}

inline CheckResult metric_monotone(std::size_t n_sets) {
  std::size_t violations = 0;
  for (std::uint64_t seed = 10; seed < 10 + n_sets; ++seed) {
    const auto [d, g] = split_toy(reference::toy_set(seed));
    const auto m = metrics::video_map(d, g, 4, std::vector<double>{0.1, 0.2, 0.3, 0.5});
    double prev = 2;
    for (const auto& [alpha, r] : m) {
      violations += r.mean > prev;
      prev = r.mean;
    }
  }
  return {5, "metrics.vmap_monotone", violations == 0, std::to_string(violations) + " increases over alpha", 0};
}

// ---------------------------------------------------------------------------

// Criteria 1-5 as named checks. `fast` swaps the tiny-preset end-to-end
// gradient check for a scaled-down network and trims repetition counts.
inline std::vector<Check> invariant_suite(bool fast) {
  std::vector<Check> c;
  c.push_back(primitive_gradients);
  if (fast) c.push_back([] { return end_to_end_gradient(detail::mini_network(), 32, 10); });
  else c.push_back([] { return end_to_end_gradient(NetworkConfig::tiny(), 32, 10); });
  c.push_back(routing_identical_windows);
  c.push_back(routing_singleton_field);
  c.push_back([] { return vote_counts("votes.full_preset", {3, 5, 5}, 32, 32); });
  c.push_back([] {
    const NetworkConfig t = NetworkConfig::tiny();
    return vote_counts("votes.tiny_preset", t.caps2_kernel, t.caps1_types, t.caps2_types);
  });
  c.push_back(spread_oracle);
  c.push_back(localization_oracle);
  c.push_back(localization_zero_logits);
  c.push_back(margin_endpoints);
  const std::size_t sets = fast ? 5 : 30;
  c.push_back([sets] { return metric_oracle(sets); });
  c.push_back([sets] { return metric_monotone(sets); });
  return c;
}

// Runs a check, timing it and turning exceptions into failures.
inline CheckResult run_check(const Check& check) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = check();
  } catch (const std::exception& e) {
    r.passed = false;
    r.name = r.name.empty() ? "unnamed" : r.name;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace vcaps::checks
