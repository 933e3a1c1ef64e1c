#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vcaps/synthgen.hpp"
#include "vcaps/train.hpp"

// Pose-matrix probing: how a class capsule's 16 pose entries move when one
// generator property is swept with everything else drawn as usual. Only
// correctly classified videos contribute.
namespace vcaps::probe {

class ProbeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbeSpec {
  synth::Motion motion = synth::Motion::linear;
  std::string property = "speed";
  std::vector<double> values;  // empty: defaults for the property
  std::size_t n_baseline = 500;
  std::size_t n_per_value = 500;
  std::size_t min_correct = 50;
  std::uint64_t seed = 11;
  synth::GenRanges ranges;
  unsigned threads = 1;
};

inline const std::vector<std::string>& properties() {
  static const std::vector<std::string> p{"speed", "direction", "size", "noise", "rotation", "zoom", "color", "control"};
  return p;
}

inline std::vector<double> default_values(const std::string& property, const synth::GenRanges& r) {
  auto lin = [](double lo, double hi, std::size_t n) {
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
    return v;
  };
  if (property == "speed") return lin(r.speed.lo, r.speed.hi, 5);
  if (property == "direction") {
    std::vector<double> v;
    for (int i = 0; i < 12; ++i) v.push_back(2.0 * std::numbers::pi * i / 12.0);
    return v;
  }
  if (property == "size") return lin(r.size.lo, r.size.hi, 5);
  if (property == "noise") return lin(r.noise.lo, r.noise.hi, 5);
  if (property == "rotation") return lin(r.rotation.lo, r.rotation.hi, 5);
  if (property == "zoom") return lin(r.zoom.lo, r.zoom.hi, 5);
  if (property == "color") return lin(r.color.lo, r.color.hi, 5);
  if (property == "control") return {0, 1, 2, 3, 4};
  throw ConfigError("unknown probe property '" + property + "'");
}

// Ranges with `property` pinned to `value`. The control property changes nothing.
inline synth::GenRanges pinned(synth::GenRanges r, const std::string& property, double value) {
  const synth::Range point{value, value};
  if (property == "speed") r.speed = point, r.accelerate_prob = 0.0;
  else if (property == "direction") r.direction = point;
  else if (property == "size") r.size = point;
  else if (property == "noise") r.noise = point;
  else if (property == "rotation") r.rotation = point;
  else if (property == "zoom") r.zoom = point;
  else if (property == "color") r.color = point;
  else if (property != "control") throw ConfigError("unknown probe property '" + property + "'");
  return r;
}

struct ProbeReport {
  std::string property;
  std::size_t motion = 0;
  std::size_t baseline_total = 0, baseline_correct = 0;
  std::vector<double> mu, sigma;   // baseline, per dimension
  std::vector<bool> degenerate;    // sigma == 0: excluded from division
  std::vector<double> values;
  std::vector<std::size_t> correct;  // per value
  std::vector<std::vector<double>> means;  // [value][dim]
  std::vector<std::vector<double>> z;      // (mu - mean) / sigma; NaN where degenerate
  std::vector<double> pearson_means;       // per dim: sweep value vs per-value mean
  std::vector<double> pearson_samples;     // per dim: sweep value vs individual poses

  double best_abs_pearson() const {
    double b = 0;
    for (double r : pearson_means)
      if (std::isfinite(r)) b = std::max(b, std::abs(r));
    return b;
  }

  nlohmann::json to_json() const {
    auto finite_or_null = [](const std::vector<double>& v) {
      nlohmann::json j = nlohmann::json::array();
      for (double x : v) j.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
      return j;
    };
    nlohmann::json zs = nlohmann::json::array();
    for (const auto& row : z) zs.push_back(finite_or_null(row));
    return {{"property", property},
            {"class", synth::kMotionNames[motion]},
            {"baseline_total", baseline_total},
            {"baseline_correct", baseline_correct},
            {"mu", mu},
            {"sigma", sigma},
            {"degenerate", degenerate},
            {"values", values},
            {"correct", correct},
            {"means", means},
            {"z", zs},
            {"pearson_means", finite_or_null(pearson_means)},
            {"pearson_samples", finite_or_null(pearson_samples)},
            {"best_abs_pearson", best_abs_pearson()}};
  }

  // One row per sweep value: value, n_correct, mean_0..15, z_0..15.
  void write_csv(std::ostream& os) const {
    os << "value,n_correct";
    for (std::size_t d = 0; d < kPoseDim; ++d) os << ",mean_" << d;
    for (std::size_t d = 0; d < kPoseDim; ++d) os << ",z_" << d;
    os << "\n";
    os.precision(10);
    for (std::size_t k = 0; k < values.size(); ++k) {
      os << values[k] << "," << correct[k];
      for (double m : means[k]) {
        os << ",";
        if (std::isfinite(m)) os << m;
      }
      for (double x : z[k]) {
        os << ",";
        if (std::isfinite(x)) os << x;
      }
      os << "\n";
    }
  }
};

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nan("");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

// Poses of correctly classified videos among `n` fresh samples.
template <typename T>
std::vector<std::vector<double>> correct_poses(const NetworkConfig& cfg, const NetworkPlan& plan,
                                               const ParameterStore<T>& ps, const synth::GenRanges& ranges,
                                               synth::Motion motion, std::size_t n, std::uint64_t seed,
                                               unsigned threads) {
  const synth::Extents e{cfg.input[0], cfg.input[1], cfg.input[2]};
  std::vector<std::optional<std::vector<double>>> got(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const synth::VideoSample s = synth::generate_sample(seed, i, motion, ranges, e);
    const Inference r = infer(cfg, plan, ps, s.frames);
    if (r.prediction.class_id == s.label) got[i] = r.pose;
  });
  std::vector<std::vector<double>> out;
  for (auto& g : got)
    if (g) out.push_back(std::move(*g));
  return out;
}

template <typename T>
ProbeReport run(const NetworkConfig& cfg, const NetworkPlan& plan, const ParameterStore<T>& ps, ProbeSpec spec) {
  if (spec.values.empty()) spec.values = default_values(spec.property, spec.ranges);
  pinned(spec.ranges, spec.property, 0.0);  // validates the property name
  ProbeReport r;
  r.property = spec.property;
  r.motion = static_cast<std::size_t>(spec.motion);
  r.values = spec.values;
  const auto base = correct_poses(cfg, plan, ps, spec.ranges, spec.motion, spec.n_baseline, spec.seed, spec.threads);
  r.baseline_total = spec.n_baseline;
  r.baseline_correct = base.size();
  const std::size_t need = std::max<std::size_t>(spec.min_correct, 2);  // sigma needs two samples
  if (base.size() < need) {
    throw ProbeError("probe aborted: only " + std::to_string(base.size()) + " of " + std::to_string(spec.n_baseline) +
                     " baseline " + synth::kMotionNames[r.motion] + " videos classified correctly (accuracy " +
                     std::to_string(static_cast<double>(base.size()) / static_cast<double>(spec.n_baseline)) +
                     ", need " + std::to_string(need) + ")");
  }
  r.mu.assign(kPoseDim, 0.0);
  r.sigma.assign(kPoseDim, 0.0);
  r.degenerate.assign(kPoseDim, false);
  for (const auto& p : base)
    for (std::size_t d = 0; d < kPoseDim; ++d) r.mu[d] += p[d];
  for (auto& m : r.mu) m /= static_cast<double>(base.size());
  for (const auto& p : base)
    for (std::size_t d = 0; d < kPoseDim; ++d) r.sigma[d] += (p[d] - r.mu[d]) * (p[d] - r.mu[d]);
  for (std::size_t d = 0; d < kPoseDim; ++d) {
    r.sigma[d] = std::sqrt(r.sigma[d] / static_cast<double>(base.size()));
    r.degenerate[d] = !(r.sigma[d] > 0);
  }
  std::vector<double> xs;
  std::vector<std::vector<double>> ys(kPoseDim);
  for (std::size_t k = 0; k < spec.values.size(); ++k) {
    const auto ranges = pinned(spec.ranges, spec.property, spec.values[k]);
    const auto poses =
        correct_poses(cfg, plan, ps, ranges, spec.motion, spec.n_per_value, spec.seed + 1000 * (k + 1), spec.threads);
    r.correct.push_back(poses.size());
    std::vector<double> mean(kPoseDim, std::nan("")), z(kPoseDim, std::nan(""));
    if (!poses.empty()) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (const auto& p : poses)
        for (std::size_t d = 0; d < kPoseDim; ++d) mean[d] += p[d];
      for (auto& m : mean) m /= static_cast<double>(poses.size());
      for (std::size_t d = 0; d < kPoseDim; ++d)
        if (!r.degenerate[d]) z[d] = (r.mu[d] - mean[d]) / r.sigma[d];
    }
    for (const auto& p : poses) {
      xs.push_back(spec.values[k]);
      for (std::size_t d = 0; d < kPoseDim; ++d) ys[d].push_back(p[d]);
    }
    r.means.push_back(mean);
    r.z.push_back(z);
  }
  for (std::size_t d = 0; d < kPoseDim; ++d) {
    std::vector<double> vx, vy;
    for (std::size_t k = 0; k < spec.values.size(); ++k)
      if (std::isfinite(r.means[k][d])) vx.push_back(spec.values[k]), vy.push_back(r.means[k][d]);
    r.pearson_means.push_back(pearson(vx, vy));
    r.pearson_samples.push_back(pearson(xs, ys[d]));
  }
  return r;
}

}  // namespace vcaps::probe
