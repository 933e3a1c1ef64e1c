#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vcaps/config.hpp"
#include "vcaps/io.hpp"
#include "vcaps/tensor.hpp"

// Procedural moving-shape videos with four motion classes.
//
// Coordinates: x is the column, y the row, pixel (r, c) has its center at
// (x, y) = (c, r). Direction 0 points right, pi/2 points down.
namespace vcaps::synth {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Motion : std::uint8_t { linear = 0, circular = 1, turn = 2, random = 3 };
enum class ShapeKind : std::uint8_t { circle = 0, square = 1, triangle = 2 };
enum class MaskMode : std::uint8_t { exact = 0, box = 1 };

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, 4> kMotionNames{"linear", "circular", "turn", "random"};
inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};

inline Motion motion_from_name(const std::string& s) {
  for (std::size_t i = 0; i < kMotionNames.size(); ++i)
    if (s == kMotionNames[i]) return static_cast<Motion>(i);
  throw ConfigError("unknown motion class '" + s + "'");
}

struct Range {
  double lo = 0.0, hi = 0.0;
  double sample(std::mt19937_64& rng) const {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  void validate(const std::string& name) const {
    if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw ConfigError("range " + name + " is empty");
  }
};

struct GenRanges {
  Range size{2.0, 6.0};            // radius, px
  Range speed{0.5, 2.5};           // px/frame
  Range acceleration{0.05, 0.15};  // px/frame^2, when accelerating
  double accelerate_prob = 0.5;
  Range direction{0.0, 2.0 * std::numbers::pi};
  Range noise{0.0, 0.2};
  Range zoom{0.97, 1.03};
  Range rotation{0.0, 0.2};
  Range color{0.25, 1.0};
  Range sweep{0.6 * std::numbers::pi, 1.4 * std::numbers::pi};  // circular: total arc angle
  Range turn_angle{std::numbers::pi / 3.0, 2.0 * std::numbers::pi / 3.0};
  std::vector<ShapeKind> shapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  double center_margin = 1.0;
  int rejection_budget = 1000;

  static GenRanges for_extents(std::size_t height) {
    GenRanges r;
    if (height >= 64) r.size = {8.0, 24.0};
    return r;
  }

  void validate() const {
    size.validate("size");
    speed.validate("speed");
    acceleration.validate("acceleration");
    direction.validate("direction");
    noise.validate("noise");
    zoom.validate("zoom");
    rotation.validate("rotation");
    color.validate("color");
    sweep.validate("sweep");
    turn_angle.validate("turn_angle");
    if (shapes.empty()) throw ConfigError("range shapes is empty");
    if (accelerate_prob < 0 || accelerate_prob > 1) throw ConfigError("accelerate_prob must be in [0,1]");
    if (rejection_budget <= 0) throw ConfigError("rejection budget must be positive");
    if (sweep.lo <= 0) throw ConfigError("circular sweep must be positive");
  }
};

struct GenParams {
  Motion motion = Motion::linear;
  ShapeKind shape = ShapeKind::circle;
  double size = 3.0;
  std::array<double, 3> color{1.0, 1.0, 1.0};
  double speed = 1.0;
  bool accelerating = false;
  double acceleration = 0.0;
  double direction = 0.0;
  double noise = 0.0;
  double rotation_rate = 0.0;
  double zoom_rate = 1.0;
  double orientation = 0.0;  // initial shape rotation
  double start_x = 0.0, start_y = 0.0;
  double sweep = 0.0;        // circular: total arc angle, signed by turning sense
  double orbit_radius = 0.0;
  std::size_t turn_frame = 0;  // turn: frame at which the new heading starts
  double turn_angle = 0.0;     // signed
  std::vector<double> walk_headings;  // random: heading of each step
  double walk_margin = 1.0;           // random: reflection band inset from the frame edge
  std::uint64_t seed = 0;
};

struct Extents {
  std::size_t frames = 8, height = 28, width = 28;
};

struct VideoSample {
  Tensor<float> frames;  // [T,H,W,3]
  Tensor<float> mask;    // [T,H,W], {0,1}
  std::size_t label = 0;
  GenParams params;
};

// Arc length travelled after t frames.
inline double arc_length(const GenParams& p, double t) {
  return p.speed * t + (p.accelerating ? 0.5 * p.acceleration * t * t : 0.0);
}

// Center trajectory (x, y) for frames 0..T-1.
inline std::vector<std::array<double, 2>> trajectory(const GenParams& p, const Extents& e) {
  std::vector<std::array<double, 2>> pts(e.frames);
  const double x0 = p.start_x, y0 = p.start_y;
  switch (p.motion) {
    case Motion::linear:
      for (std::size_t t = 0; t < e.frames; ++t) {
        const double s = arc_length(p, static_cast<double>(t));
        pts[t] = {x0 + s * std::cos(p.direction), y0 + s * std::sin(p.direction)};
      }
      break;
    case Motion::circular: {
      // Orbit center lies on the side the path turns towards.
      const double sense = p.sweep >= 0 ? 1.0 : -1.0;
      const double nx = -std::sin(p.direction) * sense, ny = std::cos(p.direction) * sense;
      const double cx = x0 + p.orbit_radius * nx, cy = y0 + p.orbit_radius * ny;
      const double phi0 = std::atan2(y0 - cy, x0 - cx);
      for (std::size_t t = 0; t < e.frames; ++t) {
        const double phi = phi0 + sense * arc_length(p, static_cast<double>(t)) / p.orbit_radius;
        pts[t] = {cx + p.orbit_radius * std::cos(phi), cy + p.orbit_radius * std::sin(phi)};
      }
      break;
    }
    case Motion::turn: {
      const double s_turn = arc_length(p, static_cast<double>(p.turn_frame));
      const double kx = x0 + s_turn * std::cos(p.direction), ky = y0 + s_turn * std::sin(p.direction);
      const double h2 = p.direction + p.turn_angle;
      for (std::size_t t = 0; t < e.frames; ++t) {
        const double s = arc_length(p, static_cast<double>(t));
        if (t <= p.turn_frame) pts[t] = {x0 + s * std::cos(p.direction), y0 + s * std::sin(p.direction)};
        else pts[t] = {kx + (s - s_turn) * std::cos(h2), ky + (s - s_turn) * std::sin(h2)};
      }
      break;
    }
    case Motion::random: {
      const double lo_x = p.walk_margin, hi_x = static_cast<double>(e.width) - 1.0 - p.walk_margin;
      const double lo_y = p.walk_margin, hi_y = static_cast<double>(e.height) - 1.0 - p.walk_margin;
      auto reflect = [](double v, double lo, double hi) {
        const double span = hi - lo;
        if (span <= 0) return lo;
        double u = std::fmod(v - lo, 2.0 * span);
        if (u < 0) u += 2.0 * span;
        return lo + (u <= span ? u : 2.0 * span - u);
      };
      pts[0] = {x0, y0};
      for (std::size_t t = 1; t < e.frames; ++t) {
        const double step = arc_length(p, static_cast<double>(t)) - arc_length(p, static_cast<double>(t - 1));
        const double h = p.walk_headings.at(t - 1);
        pts[t] = {reflect(pts[t - 1][0] + step * std::cos(h), lo_x, hi_x),
                  reflect(pts[t - 1][1] + step * std::sin(h), lo_y, hi_y)};
      }
      break;
    }
  }
  return pts;
}

inline bool inside_bounds(const std::vector<std::array<double, 2>>& pts, const Extents& e, double margin) {
  for (const auto& q : pts) {
    if (q[0] < margin || q[1] < margin || q[0] > static_cast<double>(e.width) - 1.0 - margin ||
        q[1] > static_cast<double>(e.height) - 1.0 - margin)
      return false;
  }
  return true;
}

// Draws parameters for `motion`, then resamples the start position until the
// trajectory stays inside the frame.
inline GenParams sample_params(Motion motion, std::mt19937_64& rng, const GenRanges& r, const Extents& e) {
  r.validate();
  if (e.frames < 3 && motion == Motion::turn) throw ConfigError("turn motion needs at least 3 frames");
  GenParams p;
  p.motion = motion;
  p.shape = r.shapes[std::uniform_int_distribution<std::size_t>(0, r.shapes.size() - 1)(rng)];
  p.size = r.size.sample(rng);
  for (double& c : p.color) c = r.color.sample(rng);
  p.noise = r.noise.sample(rng);
  p.rotation_rate = r.rotation.sample(rng);
  p.zoom_rate = r.zoom.sample(rng);
  p.orientation = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  const double m = r.center_margin;
  const double W = static_cast<double>(e.width), H = static_cast<double>(e.height);
  p.walk_margin = m;
  if (W - 1.0 - 2.0 * m < 0 || H - 1.0 - 2.0 * m < 0) throw ConfigError("frame too small for the center margin");
  p.speed = r.speed.sample(rng);
  p.accelerating = std::bernoulli_distribution(r.accelerate_prob)(rng);
  p.acceleration = p.accelerating ? r.acceleration.sample(rng) : 0.0;
  p.direction = r.direction.sample(rng);
  const double total = arc_length(p, static_cast<double>(e.frames - 1));
  switch (motion) {
    case Motion::linear:
      break;
    case Motion::circular: {
      const double sense = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
      const double sweep = r.sweep.sample(rng);
      p.sweep = sense * sweep;
      p.orbit_radius = total > 0 ? total / sweep : 1.0;
      break;
    }
    case Motion::turn: {
      p.turn_frame = std::uniform_int_distribution<std::size_t>(1, e.frames - 2)(rng);
      const double sense = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
      p.turn_angle = sense * r.turn_angle.sample(rng);
      break;
    }
    case Motion::random: {
      std::uniform_real_distribution<double> h(0.0, 2.0 * std::numbers::pi);
      for (std::size_t t = 1; t < e.frames; ++t) p.walk_headings.push_back(h(rng));
      break;
    }
  }
  // Only the start position is resampled, so the motion parameters keep their
  // sampling distributions exactly.
  for (int attempt = 0; attempt < r.rejection_budget; ++attempt) {
    p.start_x = std::uniform_real_distribution<double>(m, W - 1.0 - m)(rng);
    p.start_y = std::uniform_real_distribution<double>(m, H - 1.0 - m)(rng);
    if (inside_bounds(trajectory(p, e), e, m)) return p;
  }
  throw GenerationError(std::string("rejection budget exhausted sampling a ") + kMotionNames[static_cast<int>(motion)] +
                        " trajectory");
}

// Shape support in the shape's own frame: unit circle, square of half-side 1,
// equilateral triangle of circumradius 1.
inline bool inside_shape(ShapeKind k, double u, double v) {
  switch (k) {
    case ShapeKind::circle:
      return u * u + v * v <= 1.0;
    case ShapeKind::square:
      return std::max(std::abs(u), std::abs(v)) <= 1.0;
    case ShapeKind::triangle: {
      // Equilateral, circumradius 1, apex at -v: inside the three edge half-planes.
      for (int i = 0; i < 3; ++i) {
        const double a = -std::numbers::pi / 2 + std::numbers::pi / 3 + 2.0 * std::numbers::pi * i / 3.0;
        if (u * std::cos(a) + v * std::sin(a) > 0.5) return false;
      }
      return true;
    }
  }
  return false;
}

// Rasterizes the trajectory. Mask is the noise-free support; `mode` box fills
// the tight per-frame bounding box instead.
inline VideoSample render(const GenParams& p, const Extents& e, std::size_t label, MaskMode mode = MaskMode::exact) {
  const auto pts = trajectory(p, e);
  if (!inside_bounds(pts, e, 0.0)) throw GenerationError("trajectory leaves the frame");
  VideoSample s;
  s.label = label;
  s.params = p;
  s.frames = Tensor<float>(Shape{e.frames, e.height, e.width, 3});
  s.mask = Tensor<float>(Shape{e.frames, e.height, e.width});
  std::mt19937_64 noise_rng(p.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> noise(-p.noise, p.noise);
  for (std::size_t t = 0; t < e.frames; ++t) {
    const double td = static_cast<double>(t);
    const double radius = p.size * std::pow(p.zoom_rate, td);
    const double ang = p.orientation + p.rotation_rate * td;
    const double ca = std::cos(ang), sa = std::sin(ang);
    const double cx = pts[t][0], cy = pts[t][1];
    float* mask = s.mask.raw() + t * e.height * e.width;
    for (std::size_t r = 0; r < e.height; ++r)
      for (std::size_t c = 0; c < e.width; ++c) {
        const double dx = static_cast<double>(c) - cx, dy = static_cast<double>(r) - cy;
        const double u = (ca * dx + sa * dy) / radius, v = (-sa * dx + ca * dy) / radius;
        mask[r * e.width + c] = inside_shape(p.shape, u, v) ? 1.0f : 0.0f;
      }
    float* px = s.frames.raw() + t * e.height * e.width * 3;
    for (std::size_t i = 0; i < e.height * e.width; ++i)
      for (int ch = 0; ch < 3; ++ch) {
        double v = mask[i] > 0 ? p.color[ch] : 0.0;
        if (p.noise > 0) v = std::clamp(v + noise(noise_rng), 0.0, 1.0);
        px[i * 3 + ch] = static_cast<float>(v);
      }
    if (mode == MaskMode::box) {
      std::size_t r0 = e.height, r1 = 0, c0 = e.width, c1 = 0;
      for (std::size_t r = 0; r < e.height; ++r)
        for (std::size_t c = 0; c < e.width; ++c)
          if (mask[r * e.width + c] > 0) {
            r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
          }
      if (r0 <= r1)
        for (std::size_t r = r0; r <= r1; ++r)
          for (std::size_t c = c0; c <= c1; ++c) mask[r * e.width + c] = 1.0f;
    }
  }
  return s;
}

// Independent stream for sample `index` of a dataset seeded with `seed`.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline VideoSample generate_sample(std::uint64_t seed, std::uint64_t index, Motion motion, const GenRanges& r,
                                   const Extents& e, MaskMode mode = MaskMode::exact) {
  std::mt19937_64 rng = sample_rng(seed, index);
  GenParams p = sample_params(motion, rng, r, e);
  p.seed = rng();
  return render(p, e, static_cast<std::size_t>(motion), mode);
}

inline nlohmann::json params_to_json(const GenParams& p) {
  return nlohmann::json{{"motion", kMotionNames[static_cast<int>(p.motion)]},
                        {"shape", kShapeNames[static_cast<int>(p.shape)]},
                        {"size", p.size},
                        {"color", p.color},
                        {"speed", p.speed},
                        {"accelerating", p.accelerating},
                        {"acceleration", p.acceleration},
                        {"direction", p.direction},
                        {"noise", p.noise},
                        {"rotation_rate", p.rotation_rate},
                        {"zoom_rate", p.zoom_rate},
                        {"orientation", p.orientation},
                        {"start", {p.start_x, p.start_y}},
                        {"sweep", p.sweep},
                        {"orbit_radius", p.orbit_radius},
                        {"turn_frame", p.turn_frame},
                        {"turn_angle", p.turn_angle},
                        {"walk_headings", p.walk_headings},
                        {"walk_margin", p.walk_margin},
                        {"seed", p.seed}};
}

inline GenParams params_from_json(const nlohmann::json& j) {
  GenParams p;
  p.motion = motion_from_name(j.at("motion").get<std::string>());
  const std::string shape = j.at("shape").get<std::string>();
  bool found = false;
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (shape == kShapeNames[i]) p.shape = static_cast<ShapeKind>(i), found = true;
  if (!found) throw IoError("unknown shape '" + shape + "' in metadata");
  p.size = j.at("size");
  p.color = j.at("color").get<std::array<double, 3>>();
  p.speed = j.at("speed");
  p.accelerating = j.at("accelerating");
  p.acceleration = j.at("acceleration");
  p.direction = j.at("direction");
  p.noise = j.at("noise");
  p.rotation_rate = j.at("rotation_rate");
  p.zoom_rate = j.at("zoom_rate");
  p.orientation = j.at("orientation");
  p.start_x = j.at("start").at(0);
  p.start_y = j.at("start").at(1);
  p.sweep = j.at("sweep");
  p.orbit_radius = j.at("orbit_radius");
  p.turn_frame = j.at("turn_frame");
  p.turn_angle = j.at("turn_angle");
  p.walk_headings = j.at("walk_headings").get<std::vector<double>>();
  p.walk_margin = j.at("walk_margin");
  p.seed = j.at("seed");
  return p;
}

struct DatasetSpec {
  std::vector<std::size_t> counts{500, 500, 500, 500};  // per motion class
  Extents extents;
  GenRanges ranges;
  std::uint64_t seed = 7;
  std::size_t shard_size = 500;
  MaskMode mask_mode = MaskMode::exact;
  unsigned threads = 1;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  void validate() const {
    if (counts.size() != kNumClasses) throw ConfigError("dataset needs one count per motion class (4)");
    for (auto c : counts)
      if (c == 0) throw ConfigError("per-class count must be positive");
    if (extents.frames == 0 || extents.height == 0 || extents.width == 0) throw ConfigError("extents must be positive");
    if (shard_size == 0) throw ConfigError("shard size must be positive");
    ranges.validate();
  }
};

// synth.* keys: ranges are "lo, hi"; synth.shapes is a list of shape names.
inline const std::set<std::string>& synth_keys() {
  static const std::set<std::string> k{
      "synth.per_class", "synth.seed", "synth.extents", "synth.shard_size", "synth.mask",
      "synth.size", "synth.speed", "synth.acceleration", "synth.accelerate_prob", "synth.direction",
      "synth.noise", "synth.zoom", "synth.rotation", "synth.color", "synth.sweep", "synth.turn_angle",
      "synth.shapes", "synth.center_margin", "synth.rejection_budget"};
  return k;
}

inline DatasetSpec spec_from_config(const Config& c, DatasetSpec s = {}) {
  if (c.has("synth.extents")) {
    const Dims3 d = c.get_dims("synth.extents", {});
    s.extents = {d[0], d[1], d[2]};
    s.ranges = GenRanges::for_extents(d[1]);
  }
  if (c.has("synth.per_class")) s.counts.assign(kNumClasses, c.get_number<std::size_t>("synth.per_class", 0));
  s.seed = c.get_number<std::uint64_t>("synth.seed", s.seed);
  s.shard_size = c.get_number<std::size_t>("synth.shard_size", s.shard_size);
  if (c.has("synth.mask")) {
    const std::string m = c.get_string("synth.mask", "");
    if (m != "exact" && m != "box") throw ConfigError("synth.mask must be exact or box, got '" + m + "'");
    s.mask_mode = m == "box" ? MaskMode::box : MaskMode::exact;
  }
  auto range = [&](const char* key, Range& r) {
    if (!c.has(key)) return;
    const auto v = c.get_list<double>(key, {});
    if (v.size() != 2) throw ConfigError(std::string(key) + " expects 'lo, hi'");
    r = {v[0], v[1]};
  };
  GenRanges& r = s.ranges;
  range("synth.size", r.size);
  range("synth.speed", r.speed);
  range("synth.acceleration", r.acceleration);
  range("synth.direction", r.direction);
  range("synth.noise", r.noise);
  range("synth.zoom", r.zoom);
  range("synth.rotation", r.rotation);
  range("synth.color", r.color);
  range("synth.sweep", r.sweep);
  range("synth.turn_angle", r.turn_angle);
  r.accelerate_prob = c.get_number<double>("synth.accelerate_prob", r.accelerate_prob);
  r.center_margin = c.get_number<double>("synth.center_margin", r.center_margin);
  r.rejection_budget = c.get_number<int>("synth.rejection_budget", r.rejection_budget);
  if (c.has("synth.shapes")) {
    r.shapes.clear();
    for (const auto& name : split(c.get_string("synth.shapes", ""), ',')) {
      const auto it = std::find(kShapeNames.begin(), kShapeNames.end(), name);
      if (it == kShapeNames.end()) throw ConfigError("unknown shape '" + name + "'");
      r.shapes.push_back(static_cast<ShapeKind>(it - kShapeNames.begin()));
    }
  }
  return s;
}

// Round-robin label order over the classes that still have samples left.
inline std::vector<std::size_t> label_order(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> left = counts, order;
  bool any = true;
  while (any) {
    any = false;
    for (std::size_t c = 0; c < left.size(); ++c)
      if (left[c] > 0) {
        order.push_back(c);
        --left[c];
        any = true;
      }
  }
  return order;
}

struct ManifestEntry {
  std::size_t index = 0;
  std::size_t label = 0;
  std::string shard;
  std::uint64_t offset = 0;
  GenParams params;
};

inline std::string shard_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard-%03zu.vct", k);
  return buf;
}

inline nlohmann::json spec_to_json(const DatasetSpec& s) {
  const auto rg = [](const Range& r) { return nlohmann::json::array({r.lo, r.hi}); };
  std::vector<std::string> shapes;
  for (auto k : s.ranges.shapes) shapes.push_back(kShapeNames[static_cast<int>(k)]);
  return nlohmann::json{
      {"counts", s.counts},
      {"extents", {s.extents.frames, s.extents.height, s.extents.width}},
      {"seed", s.seed},
      {"shard_size", s.shard_size},
      {"mask_mode", s.mask_mode == MaskMode::exact ? "exact" : "box"},
      {"ranges",
       {{"size", rg(s.ranges.size)}, {"speed", rg(s.ranges.speed)}, {"acceleration", rg(s.ranges.acceleration)},
        {"accelerate_prob", s.ranges.accelerate_prob}, {"direction", rg(s.ranges.direction)},
        {"noise", rg(s.ranges.noise)}, {"zoom", rg(s.ranges.zoom)}, {"rotation", rg(s.ranges.rotation)},
        {"color", rg(s.ranges.color)}, {"sweep", rg(s.ranges.sweep)}, {"turn_angle", rg(s.ranges.turn_angle)},
        {"shapes", shapes}, {"center_margin", s.ranges.center_margin},
        {"rejection_budget", s.ranges.rejection_budget}}}};
}

// Writes shards + manifest.jsonl + dataset.json into `dir`. Samples are
// generated in parallel when threads > 1; output is identical either way.
inline std::vector<ManifestEntry> generate_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto labels = label_order(spec.counts);
  const std::size_t n = labels.size();
  std::vector<ManifestEntry> manifest(n);
  for (std::size_t shard = 0; shard * spec.shard_size < n; ++shard) {
    const std::size_t begin = shard * spec.shard_size, end = std::min(n, begin + spec.shard_size);
    std::vector<VideoSample> batch(end - begin);
    const unsigned threads = std::max(1u, spec.threads);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = begin + w; i < end; i += threads) {
            batch[i - begin] = generate_sample(spec.seed, i, static_cast<Motion>(labels[i]), spec.ranges,
                                               spec.extents, spec.mask_mode);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    const std::filesystem::path path = dir / shard_name(shard);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (std::size_t i = begin; i < end; ++i) {
      manifest[i] = {i, labels[i], shard_name(shard), static_cast<std::uint64_t>(os.tellp()), batch[i - begin].params};
      io::write_tensor(os, batch[i - begin].frames);
      io::write_tensor(os, batch[i - begin].mask);
    }
    if (!os) throw IoError("write failed for " + path.string());
  }
  {
    std::ofstream os(dir / "manifest.jsonl", std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir / "manifest.jsonl").string());
    for (const auto& m : manifest) {
      nlohmann::json j{{"index", m.index},
                       {"label", m.label},
                       {"class", kMotionNames[m.label]},
                       {"shard", m.shard},
                       {"offset", m.offset},
                       {"params", params_to_json(m.params)}};
      os << j.dump() << "\n";
    }
  }
  {
    std::ofstream os(dir / "dataset.json", std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir / "dataset.json").string());
    os << spec_to_json(spec).dump(2) << "\n";
  }
  return manifest;
}

struct Dataset {
  Extents extents;
  std::vector<VideoSample> samples;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw IoError("cannot open " + (dir / "manifest.jsonl").string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("index"), j.at("label"), j.at("shard"), j.at("offset"), params_from_json(j.at("params"))});
    } catch (const nlohmann::json::exception& e) {
      throw IoError((dir / "manifest.jsonl").string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto manifest = read_manifest(dir);
  std::string open_name;
  std::ifstream shard;
  for (const auto& m : manifest) {
    if (m.shard != open_name) {
      shard = std::ifstream(dir / m.shard, std::ios::binary);
      if (!shard) throw IoError("cannot open shard " + (dir / m.shard).string());
      open_name = m.shard;
    }
    shard.seekg(static_cast<std::streamoff>(m.offset));
    VideoSample s;
    s.frames = io::read_tensor<float>(shard);
    s.mask = io::read_tensor<float>(shard);
    s.label = m.label;
    s.params = m.params;
    if (s.frames.rank() != 4 || s.mask.rank() != 3) throw IoError("shard record has unexpected rank in " + m.shard);
    d.samples.push_back(std::move(s));
  }
  if (!d.samples.empty()) {
    const auto& s = d.samples.front().frames.shape();
    d.extents = {s[0], s[1], s[2]};
  }
  return d;
}

// Hash of the manifest bytes (dataset identity for provenance records).
inline std::uint64_t manifest_hash(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.jsonl", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "manifest.jsonl").string());
  std::stringstream ss;
  ss << in.rdbuf();
  return fnv1a64(ss.str());
}

// Per-frame centroid (x, y) of a mask; frames with empty support get NaN.
inline std::vector<std::array<double, 2>> mask_centroids(const Tensor<float>& mask) {
  const std::size_t T = mask.extent(0), H = mask.extent(1), W = mask.extent(2);
  std::vector<std::array<double, 2>> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    double sx = 0, sy = 0, n = 0;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        if (mask[(t * H + r) * W + c] > 0) sx += static_cast<double>(c), sy += static_cast<double>(r), n += 1;
    out[t] = n > 0 ? std::array<double, 2>{sx / n, sy / n}
                   : std::array<double, 2>{std::nan(""), std::nan("")};
  }
  return out;
}

}  // namespace vcaps::synth
