#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vcaps/tensor.hpp"

// Detection metrics under the single-detection-per-video protocol: each test
// video carries exactly one predicted class, one confidence and one predicted
// mask volume. Frame AP ranks every frame of every video by its video's
// confidence; video AP ranks videos. AP uses all-points interpolation.
namespace vcaps::metrics {

// Axis-aligned box in continuous pixel coordinates, half-open: [x0, x1) x [y0, y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
  bool valid() const { return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && x1 >= x0 && y1 >= y0; }
};

inline double iou_2d(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw UsageError("iou_2d: invalid box");
  const double aa = a.area(), ab = b.area();
  if (aa == 0 && ab == 0) return 1.0;
  const double w = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double h = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = w * h;
  return inter / (aa + ab - inter);
}

namespace detail {

template <typename A, typename B>
std::pair<std::size_t, std::size_t> overlap_counts(const A* a, const B* b, std::size_t n) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool x = a[i] != A{0}, y = b[i] != B{0};
    inter += x && y;
    uni += x || y;
  }
  return {inter, uni};
}

inline double ratio(std::size_t inter, std::size_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// Nonzero entries are foreground. Both empty gives 1.
template <typename A, typename B>
double iou_2d(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape() || a.rank() != 2) throw UsageError("iou_2d: masks must be [H,W] with matching extents");
  const auto [i, u] = detail::overlap_counts(a.raw(), b.raw(), a.size());
  return detail::ratio(i, u);
}

template <typename A, typename B>
double iou_3d(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape() || a.rank() != 3) throw UsageError("iou_3d: volumes must be [T,H,W] with matching extents");
  const auto [i, u] = detail::overlap_counts(a.raw(), b.raw(), a.size());
  return detail::ratio(i, u);
}

// Tight box around the foreground of frame `t` of a [T,H,W] volume; nullopt when empty.
template <typename T>
std::optional<Box> frame_box(const Tensor<T>& vol, std::size_t t) {
  const std::size_t H = vol.extent(1), W = vol.extent(2);
  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0;
  const T* p = vol.raw() + t * H * W;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (p[r * W + c] != T{0}) {
        r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
      }
  if (r0 > r1) return std::nullopt;
  return Box{static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1), static_cast<double>(r1 + 1)};
}

template <typename T>
bool frame_empty(const Tensor<T>& vol, std::size_t t) {
  const std::size_t n = vol.extent(1) * vol.extent(2);
  const T* p = vol.raw() + t * n;
  return std::all_of(p, p + n, [](T v) { return v == T{0}; });
}

// Per-frame overlap, comparing masks directly or their tight boxes. A frame with
// an empty prediction and nonempty truth scores 0.
enum class Overlap : std::uint8_t { mask, box };

template <typename A, typename B>
double frame_iou(const Tensor<A>& pred, const Tensor<B>& gt, std::size_t t, Overlap mode) {
  if (mode == Overlap::mask) {
    const std::size_t n = pred.extent(1) * pred.extent(2);
    const auto [i, u] = detail::overlap_counts(pred.raw() + t * n, gt.raw() + t * n, n);
    return detail::ratio(i, u);
  }
  const auto a = frame_box(pred, t);
  const auto b = frame_box(gt, t);
  if (!a && !b) return 1.0;
  if (!a || !b) return 0.0;
  return iou_2d(*a, *b);
}

struct Detection {
  std::size_t video_id = 0;
  std::size_t class_id = 0;
  double confidence = 0.0;
  Tensor<std::uint8_t> mask;  // [T,H,W]
};

struct GroundTruth {
  std::size_t video_id = 0;
  std::size_t class_id = 0;
  Tensor<std::uint8_t> mask;  // [T,H,W]
};

// One ranked candidate: its score, tie-break key and whether it matched.
struct Candidate {
  double confidence = 0.0;
  std::size_t video_id = 0;
  std::size_t frame = 0;
  bool true_positive = false;
};

inline bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.video_id != b.video_id) return a.video_id < b.video_id;
  return a.frame < b.frame;
}

// All-points AP: mean over positives of the interpolated precision at each
// true-positive rank. Misses count as zero precision.
inline double average_precision(std::vector<Candidate> cands, std::size_t positives) {
  if (positives == 0) throw UsageError("average_precision: no positives");
  std::sort(cands.begin(), cands.end(), ranks_before);
  std::vector<double> precision(cands.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    tp += cands[k].true_positive;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  for (std::size_t k = cands.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double sum = 0;
  for (std::size_t k = 0; k < cands.size(); ++k)
    if (cands[k].true_positive) sum += precision[k];
  return sum / static_cast<double>(positives);
}

struct MapResult {
  std::map<std::size_t, double> per_class;  // classes present in ground truth
  double mean = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline void check_inputs(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  std::map<std::size_t, const GroundTruth*> by_video;
  for (const auto& g : gts) {
    if (g.mask.rank() != 3) throw UsageError("ground truth mask must be [T,H,W]");
    if (!by_video.emplace(g.video_id, &g).second)
      throw UsageError("duplicate ground truth for video " + std::to_string(g.video_id));
  }
  std::map<std::size_t, bool> seen;
  for (const auto& d : dets) {
    if (!std::isfinite(d.confidence)) throw UsageError("detection confidence must be finite");
    auto it = by_video.find(d.video_id);
    if (it == by_video.end()) throw UsageError("detection for unknown video " + std::to_string(d.video_id));
    if (d.mask.shape() != it->second->mask.shape())
      throw UsageError("detection mask extents differ from video " + std::to_string(d.video_id));
    if (seen[d.video_id]) throw UsageError("more than one detection for video " + std::to_string(d.video_id));
    seen[d.video_id] = true;
  }
}

template <typename PerClass>
MapResult fold_classes(std::size_t num_classes, PerClass per_class) {
  MapResult r;
  double sum = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto [cands, positives] = per_class(c);
    if (positives == 0) {
      r.warnings.push_back("class " + std::to_string(c) + " has no ground truth; skipped");
      continue;
    }
    r.per_class[c] = average_precision(std::move(cands), positives);
    sum += r.per_class[c];
  }
  r.mean = r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
  return r;
}

}  // namespace detail

inline const GroundTruth& find_gt(const std::vector<GroundTruth>& gts, std::size_t video_id) {
  for (const auto& g : gts)
    if (g.video_id == video_id) return g;
  throw UsageError("no ground truth for video " + std::to_string(video_id));
}

// Frame AP per class. A candidate is every frame whose predicted mask is
// nonempty; positives are the nonempty ground-truth frames of the class.
inline MapResult frame_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           std::size_t num_classes, double alpha, Overlap mode = Overlap::mask) {
  detail::check_inputs(dets, gts);
  return detail::fold_classes(num_classes, [&](std::size_t c) {
    std::vector<Candidate> cands;
    std::size_t positives = 0;
    for (const auto& g : gts)
      if (g.class_id == c)
        for (std::size_t t = 0; t < g.mask.extent(0); ++t) positives += !frame_empty(g.mask, t);
    for (const auto& d : dets) {
      if (d.class_id != c) continue;
      const GroundTruth& g = find_gt(gts, d.video_id);
      for (std::size_t t = 0; t < d.mask.extent(0); ++t) {
        if (frame_empty(d.mask, t)) continue;
        const bool tp = g.class_id == c && !frame_empty(g.mask, t) && frame_iou(d.mask, g.mask, t, mode) >= alpha;
        cands.push_back({d.confidence, d.video_id, t, tp});
      }
    }
    return std::pair{std::move(cands), positives};
  });
}

// Video AP per class with volumetric IoU.
inline MapResult video_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           std::size_t num_classes, double alpha) {
  detail::check_inputs(dets, gts);
  return detail::fold_classes(num_classes, [&](std::size_t c) {
    std::vector<Candidate> cands;
    std::size_t positives = 0;
    for (const auto& g : gts) positives += g.class_id == c;
    for (const auto& d : dets) {
      if (d.class_id != c) continue;
      const GroundTruth& g = find_gt(gts, d.video_id);
      cands.push_back({d.confidence, d.video_id, 0, g.class_id == c && iou_3d(d.mask, g.mask) >= alpha});
    }
    return std::pair{std::move(cands), positives};
  });
}

inline std::map<double, MapResult> video_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                             std::size_t num_classes, const std::vector<double>& alphas) {
  std::map<double, MapResult> out;
  for (double a : alphas) out.emplace(a, video_map(dets, gts, num_classes, a));
  return out;
}

struct EvalReport {
  std::size_t videos = 0;
  double accuracy = 0.0;
  double mean_iou_3d = 0.0;
  double frame_alpha = 0.5;
  MapResult frame;
  std::map<double, MapResult> video;
  std::vector<std::vector<std::size_t>> confusion;  // [gt][pred]

  nlohmann::json to_json() const {
    auto per_class = [](const MapResult& m) {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& [c, ap] : m.per_class) j[std::to_string(c)] = ap;
      return j;
    };
    nlohmann::json v = nlohmann::json::object();
    for (const auto& [a, m] : video) v[threshold_text(a)] = {{"mean", m.mean}, {"per_class", per_class(m)}};
    std::vector<std::string> warnings = frame.warnings;
    return {{"videos", videos},
            {"accuracy", accuracy},
            {"mean_iou_3d", mean_iou_3d},
            {"f_map", {{"alpha", frame_alpha}, {"mean", frame.mean}, {"per_class", per_class(frame)}}},
            {"v_map", v},
            {"confusion", confusion},
            {"warnings", warnings}};
  }

  // Rows of (metric, class, threshold, value); "all" marks class means.
  void write_csv(std::ostream& os) const {
    os << "metric,class,threshold,value\n";
    os << "accuracy,all,," << num(accuracy) << "\n";
    os << "mean_iou_3d,all,," << num(mean_iou_3d) << "\n";
    os << "f_map,all," << threshold_text(frame_alpha) << "," << num(frame.mean) << "\n";
    for (const auto& [c, ap] : frame.per_class) os << "f_ap," << c << "," << threshold_text(frame_alpha) << "," << num(ap) << "\n";
    for (const auto& [a, m] : video) {
      os << "v_map,all," << threshold_text(a) << "," << num(m.mean) << "\n";
      for (const auto& [c, ap] : m.per_class) os << "v_ap," << c << "," << threshold_text(a) << "," << num(ap) << "\n";
    }
  }

  static std::string threshold_text(double a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", a);
    return buf;
  }

  static std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

inline EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           std::size_t num_classes, double frame_alpha = 0.5,
                           const std::vector<double>& video_alphas = {0.1, 0.2, 0.3, 0.5},
                           Overlap mode = Overlap::mask) {
  detail::check_inputs(dets, gts);
  if (dets.size() != gts.size()) throw UsageError("evaluate: need exactly one detection per video");
  EvalReport r;
  r.videos = gts.size();
  r.frame_alpha = frame_alpha;
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  double iou_sum = 0;
  for (const auto& d : dets) {
    const GroundTruth& g = find_gt(gts, d.video_id);
    if (g.class_id >= num_classes || d.class_id >= num_classes) throw UsageError("class id out of range");
    correct += d.class_id == g.class_id;
    ++r.confusion[g.class_id][d.class_id];
    iou_sum += iou_3d(d.mask, g.mask);
  }
  r.accuracy = gts.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(gts.size());
  r.mean_iou_3d = gts.empty() ? 0.0 : iou_sum / static_cast<double>(gts.size());
  r.frame = frame_map(dets, gts, num_classes, frame_alpha, mode);
  r.video = video_map(dets, gts, num_classes, video_alphas);
  return r;
}

}  // namespace vcaps::metrics
