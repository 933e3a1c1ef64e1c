#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>

#include "vcaps/ops.hpp"

namespace vcaps {

// Linear margin ramp from m_start to m_end over total_steps, clamped after.
struct MarginSchedule {
  double m_start = 0.2;
  double m_end = 0.9;
  std::uint64_t total_steps = 1;

  void validate() const {
    if (total_steps == 0) throw ConfigError("margin schedule: total_steps must be positive");
    if (!(m_start <= m_end)) throw ConfigError("margin schedule: m_start must not exceed m_end");
  }

  double margin(std::uint64_t step) const {
    if (step >= total_steps) return m_end;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return m_start + (m_end - m_start) * frac;
  }
};

// Sum over i != t of max(0, m - (a_t - a_i))^2.
template <typename T>
Var<T> spread_loss(const Var<T>& activations, std::size_t target, T margin) {
  const std::size_t n = activations.size();
  if (target >= n) throw UsageError("spread_loss: target " + std::to_string(target) + " out of range");
  const auto a = activations.value().data();
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (i == target) continue;
    const T h = std::max(T{0}, margin - (a[target] - a[i]));
    total += h * h;
  }
  return activations.tape().record(
      "spread_loss", Tensor<T>::scalar(total), {activations},
      [activations, target, margin](Tape<T>& tape, const Tensor<T>& go) {
        const auto a = activations.value().data();
        Tensor<T> g(activations.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (i == target) continue;
          const T h = std::max(T{0}, margin - (a[target] - a[i]));
          g[i] = T{2} * h * go[0];
          g[target] -= T{2} * h * go[0];
        }
        tape.accumulate(activations, g);
      });
}

// Mean binary cross-entropy of sigmoid(logits) against a {0,1} mask, in the
// log-sigmoid form: softplus(F) - y F.
template <typename T>
Var<T> localization_loss(const Var<T>& logits, const Tensor<T>& target) {
  if (logits.size() != target.size()) {
    throw ConfigError("localization_loss: logits " + shape_str(logits.shape()) + " vs mask " +
                      shape_str(target.shape()));
  }
  const auto f = logits.value().data();
  const auto y = target.data();
  T total{0};
  for (std::size_t i = 0; i < f.size(); ++i) total += ops::softplus(f[i]) - y[i] * f[i];
  const T inv_n = T{1} / static_cast<T>(f.size());
  return logits.tape().record(
      "localization_loss", Tensor<T>::scalar(total * inv_n), {logits},
      [logits, target, inv_n](Tape<T>& tape, const Tensor<T>& go) {
        const auto f = logits.value().data();
        Tensor<T> g(logits.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = (ops::stable_sigmoid(f[i]) - target[i]) * inv_n * go[0];
        tape.accumulate(logits, g);
      });
}

// Mean squared error against a fixed target.
template <typename T>
Var<T> reconstruction_loss(const Var<T>& prediction, const Tensor<T>& target) {
  if (prediction.size() != target.size()) throw ConfigError("reconstruction_loss: shape mismatch");
  const auto p = prediction.value().data();
  T total{0};
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - target[i]) * (p[i] - target[i]);
  const T inv_n = T{1} / static_cast<T>(p.size());
  return prediction.tape().record(
      "reconstruction_loss", Tensor<T>::scalar(total * inv_n), {prediction},
      [prediction, target, inv_n](Tape<T>& tape, const Tensor<T>& go) {
        const auto p = prediction.value().data();
        Tensor<T> g(prediction.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = T{2} * (p[i] - target[i]) * inv_n * go[0];
        tape.accumulate(prediction, g);
      });
}

struct LossWeights {
  double lambda = 0.0002;          // localization weight
  double reconstruction = 0.0002;  // reconstruction weight
  bool classification = true;
  bool localization = true;
  bool use_reconstruction = false;
};

template <typename T>
struct LossComponents {
  std::optional<Var<T>> classification;
  std::optional<Var<T>> localization;
  std::optional<Var<T>> reconstruction;
};

// L = L_c + lambda L_s (+ w_r L_r) over the enabled terms.
template <typename T>
Var<T> total_loss(const LossComponents<T>& c, const LossWeights& w) {
  std::optional<Var<T>> total;
  auto add = [&](const std::optional<Var<T>>& term, const char* name, double weight) {
    if (!term) throw UsageError(std::string("total_loss: missing ") + name + " component");
    Var<T> v = weight == 1.0 ? *term : ops::scale(*term, static_cast<T>(weight));
    total = total ? ops::add(*total, v) : v;
  };
  if (w.classification) add(c.classification, "classification", 1.0);
  if (w.localization) add(c.localization, "localization", w.lambda);
  if (w.use_reconstruction) add(c.reconstruction, "reconstruction", w.reconstruction);
  if (!total) throw UsageError("total_loss: no loss term enabled");
  return *total;
}

}  // namespace vcaps
