#pragma once

// Direct, unoptimized reference computations. They share no code path with the
// production kernels and serve as oracles for tests and `vcaps selfcheck`.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "vcaps/conv.hpp"
#include "vcaps/tensor.hpp"

namespace vcaps::reference {

// Nested-loop 3D convolution: every output element is the inner product of the
// kernel with its (zero padded) input window.
inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& k, const ConvGeometry& g) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    out[a] = (xs[a] + g.pad.lo[a] + g.pad.hi[a] - ks[a]) / g.stride[a] + 1;
  }
  Tensor<double> y(Shape{out[0], out[1], out[2], ks[4]});
  for (std::size_t ot = 0; ot < out[0]; ++ot)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow)
        for (std::size_t co = 0; co < ks[4]; ++co) {
          double acc = 0.0;
          for (std::size_t kt = 0; kt < ks[0]; ++kt)
            for (std::size_t kh = 0; kh < ks[1]; ++kh)
              for (std::size_t kw = 0; kw < ks[2]; ++kw) {
                const long it = static_cast<long>(ot * g.stride[0] + kt) - static_cast<long>(g.pad.lo[0]);
                const long ih = static_cast<long>(oh * g.stride[1] + kh) - static_cast<long>(g.pad.lo[1]);
                const long iw = static_cast<long>(ow * g.stride[2] + kw) - static_cast<long>(g.pad.lo[2]);
                if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long>(xs[0]) || ih >= static_cast<long>(xs[1]) ||
                    iw >= static_cast<long>(xs[2]))
                  continue;
                for (std::size_t ci = 0; ci < ks[3]; ++ci) acc += x.at(it, ih, iw, ci) * k.at(kt, kh, kw, ci, co);
              }
          y.at(ot, oh, ow, co) = acc;
        }
  return y;
}

// Sum over i != t of max(0, m - (a_t - a_i))^2, one term at a time.
inline double spread_loss(const std::vector<double>& a, std::size_t t, double m) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i == t) continue;
    const double h = m - (a[t] - a[i]);
    if (h > 0) s += h * h;
  }
  return s;
}

// Mean binary cross-entropy evaluated with explicit probabilities in long double.
inline double localization_loss(const std::vector<double>& logits, const std::vector<double>& target) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const long double p = 1.0L / (1.0L + std::exp(-static_cast<long double>(logits[i])));
    s += target[i] * std::log(p) + (1.0L - target[i]) * std::log(1.0L - p);
  }
  return static_cast<double>(-s / static_cast<long double>(logits.size()));
}

// Rule-based motion classifier over a centroid track (x, y per frame).
// Returns 0 linear, 1 circular, 2 turn, 3 random.
inline std::size_t classify_track(const std::vector<std::array<double, 2>>& c) {
  std::vector<double> heading;
  for (std::size_t t = 0; t + 1 < c.size(); ++t) {
    const double dx = c[t + 1][0] - c[t][0], dy = c[t + 1][1] - c[t][1];
    if (std::isfinite(dx) && std::isfinite(dy) && dx * dx + dy * dy > 1e-6) heading.push_back(std::atan2(dy, dx));
  }
  if (heading.size() < 2) return 0;
  std::vector<double> turn;
  for (std::size_t i = 0; i + 1 < heading.size(); ++i) {
    double d = heading[i + 1] - heading[i];
    while (d > std::numbers::pi) d -= 2 * std::numbers::pi;
    while (d < -std::numbers::pi) d += 2 * std::numbers::pi;
    turn.push_back(d);
  }
  std::size_t big = 0, pos = 0, neg = 0;
  double total = 0;
  for (double d : turn) {
    if (std::abs(d) > 0.8) ++big;
    if (d > 0.1) ++pos;
    if (d < -0.1) ++neg;
    total += d;
  }
  if (big >= 2) return 3;
  if (big == 1) return (pos > 1 && neg > 1) ? 3 : 2;
  if (std::abs(total) > 0.6 && (pos == 0 || neg == 0)) return 1;
  if (pos + neg >= turn.size() / 2 + 1) return 3;
  return 0;
}

// One video of an evaluation toy set: prediction and truth side by side.
struct ToyVideo {
  std::size_t id = 0;
  std::size_t gt_class = 0;
  Tensor<std::uint8_t> gt;  // [T,H,W]
  std::size_t pred_class = 0;
  double confidence = 0.0;
  Tensor<std::uint8_t> pred;  // [T,H,W]
};

inline Tensor<std::uint8_t> rect_volume(std::size_t T, std::size_t H, std::size_t W, std::size_t t0, std::size_t t1,
                                        std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  Tensor<std::uint8_t> m(Shape{T, H, W});
  for (std::size_t t = t0; t < t1; ++t)
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) m[(t * H + r) * W + c] = 1;
  return m;
}

// Twenty videos over four classes: shifted-rectangle predictions with mixed
// overlap, some wrong classes, some empty frames and tied confidences.
inline std::vector<ToyVideo> toy_set(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pos(0, 5), len(2, 5), cls(0, 3), tie(0, 5);
  std::vector<ToyVideo> v;
  for (std::size_t i = 0; i < 20; ++i) {
    ToyVideo x;
    x.id = 100 - 3 * i;
    x.gt_class = cls(rng);
    const std::size_t r = pos(rng), c = pos(rng), h = len(rng), w = len(rng);
    x.gt = rect_volume(5, 12, 12, 0, 5, r, r + h, c, c + w);
    const std::size_t dr = pos(rng) / 2, dc = pos(rng) / 2, t0 = rng() % 2, t1 = 4 + rng() % 2;
    x.pred = rect_volume(5, 12, 12, t0, t1, r + dr, r + dr + h, c + dc, c + dc + w);
    x.pred_class = (rng() % 4 == 0) ? cls(rng) : x.gt_class;
    x.confidence = 0.5 + 0.1 * static_cast<double>(tie(rng));
    v.push_back(std::move(x));
  }
  return v;
}

inline double voxel_iou(const Tensor<std::uint8_t>& a, const Tensor<std::uint8_t>& b, std::size_t begin,
                        std::size_t end) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = begin; i < end; ++i) {
    if (a[i] && b[i]) ++inter;
    if (a[i] || b[i]) ++uni;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct RankedItem {
  double confidence;
  std::size_t video, frame;
  bool tp;
};

// AP by enumerating every rank cut: for each true positive at rank k, take the
// best precision over all cuts at or below k. Ranks come from pairwise counting.
inline double brute_force_ap(const std::vector<RankedItem>& items, std::size_t positives) {
  const std::size_t n = items.size();
  auto before = [&](std::size_t i, std::size_t j) {
    const auto& a = items[i];
    const auto& b = items[j];
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.video != b.video) return a.video < b.video;
    return a.frame < b.frame;
  };
  std::vector<std::size_t> rank(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && before(j, i)) ++rank[i];
  std::vector<std::size_t> at(n);
  for (std::size_t i = 0; i < n; ++i) at[rank[i]] = i;
  auto precision_at_cut = [&](std::size_t k) {
    std::size_t tp = 0;
    for (std::size_t r = 0; r <= k; ++r) tp += items[at[r]].tp;
    return static_cast<double>(tp) / static_cast<double>(k + 1);
  };
  double sum = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!items[at[k]].tp) continue;
    double best = 0;
    for (std::size_t k2 = k; k2 < n; ++k2) best = std::max(best, precision_at_cut(k2));
    sum += best;
  }
  return sum / static_cast<double>(positives);
}

// f-mAP (frame mask IoU) or v-mAP (volume IoU) by direct enumeration. Classes
// without ground truth are left out of the mean.
inline double brute_force_map(const std::vector<ToyVideo>& vids, std::size_t classes, double alpha, bool per_frame) {
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<RankedItem> items;
    std::size_t positives = 0;
    for (const auto& v : vids) {
      const std::size_t T = v.gt.extent(0), F = v.gt.extent(1) * v.gt.extent(2);
      if (per_frame) {
        for (std::size_t t = 0; t < T; ++t) {
          bool gt_any = false, pred_any = false;
          for (std::size_t i = t * F; i < (t + 1) * F; ++i) gt_any |= v.gt[i] != 0, pred_any |= v.pred[i] != 0;
          if (v.gt_class == c && gt_any) ++positives;
          if (v.pred_class == c && pred_any)
            items.push_back({v.confidence, v.id, t,
                             v.gt_class == c && gt_any && voxel_iou(v.pred, v.gt, t * F, (t + 1) * F) >= alpha});
        }
      } else {
        if (v.gt_class == c) ++positives;
        if (v.pred_class == c)
          items.push_back({v.confidence, v.id, 0, v.gt_class == c && voxel_iou(v.pred, v.gt, 0, T * F) >= alpha});
      }
    }
    if (positives == 0) continue;
    total += brute_force_ap(items, positives);
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

}  // namespace vcaps::reference
