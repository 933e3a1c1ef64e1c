#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vcaps/capsule.hpp"
#include "vcaps/config.hpp"
#include "vcaps/loss.hpp"
#include "vcaps/ops.hpp"

namespace vcaps {

struct ConvLayerSpec {
  std::size_t channels = 0;
  Dims3 stride{1, 1, 1};
};

struct NetworkConfig {
  std::string preset = "tiny";
  Dims3 input{8, 28, 28};
  std::size_t input_channels = 3;
  Dims3 conv_kernel{3, 3, 3};
  std::vector<ConvLayerSpec> conv;
  std::size_t caps1_types = 8;
  Dims3 caps1_kernel{3, 5, 5};
  bool pose_relu = true;
  std::size_t caps2_types = 8;
  Dims3 caps2_kernel{3, 3, 3};
  Dims3 caps2_stride{1, 2, 2};
  std::size_t classes = 4;
  RoutingConfig routing;
  bool coordinate_addition = true;
  bool capsule_skips = true;
  bool extra_conv_skips = false;
  bool reconstruction_head = false;
  std::vector<std::size_t> extra_skip_layers{1, 2, 4};  // 1-based conv layer indices
  std::size_t decoder_narrow = 16;  // ConvTr1, Conv1x, ConvTr2, Conv2x
  std::size_t decoder_wide = 32;    // ConvTr3 and the upsampling stages
  double transform_init_std = 0.1;
  LossWeights loss;
  double margin_start = 0.2;
  double margin_end = 0.9;

  static NetworkConfig tiny() {
    NetworkConfig c;
    c.preset = "tiny";
    c.conv = {{32, {1, 1, 1}}, {64, {1, 2, 2}}, {64, {1, 1, 1}}, {64, {1, 1, 1}}};
    return c;
  }

  // Final conv features are 8x28x28 after the six-layer stack (Conv5 keeps the
  // stride-2 extent; see the README note on the layer table).
  static NetworkConfig full() {
    NetworkConfig c;
    c.preset = "full";
    c.input = {8, 112, 112};
    c.conv = {{64, {1, 1, 1}}, {128, {1, 2, 2}}, {256, {1, 1, 1}}, {256, {1, 2, 2}}, {512, {1, 1, 1}}, {512, {1, 1, 1}}};
    c.caps1_types = 32;
    c.caps1_kernel = {3, 9, 9};
    c.caps2_types = 32;
    c.caps2_kernel = {3, 5, 5};
    c.classes = 24;
    c.decoder_narrow = 128;
    c.decoder_wide = 256;
    return c;
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{
        "net.preset", "net.input", "net.input_channels", "conv.kernel", "conv.channels", "conv.strides",
        "caps1.types", "caps1.kernel", "caps1.pose_relu", "caps2.types", "caps2.kernel", "caps2.stride",
        "classes", "routing.iterations", "routing.inv_temp_start", "routing.inv_temp_end",
        "routing.variance_floor", "routing.cost", "toggle.coordinate_addition", "toggle.capsule_skips",
        "toggle.extra_conv_skips", "toggle.reconstruction_head", "extra_skip.layers", "decoder.narrow",
        "decoder.wide", "init.transform_std", "loss.lambda", "loss.reconstruction_weight",
        "loss.classification", "loss.localization", "margin.start", "margin.end"};
    return k;
  }

  // Reads the net.* / conv.* / ... keys of `c`; unset keys keep the preset's value.
  static NetworkConfig from_config(const Config& c) {
    const std::string preset = c.get_string("net.preset", "tiny");
    NetworkConfig n;
    if (preset == "tiny") n = tiny();
    else if (preset == "full") n = full();
    else if (preset == "custom") n = tiny();
    else throw ConfigError("net.preset must be full, tiny or custom, got '" + preset + "'");
    n.preset = preset;
    n.input = c.get_dims("net.input", n.input);
    n.input_channels = c.get_number<std::size_t>("net.input_channels", n.input_channels);
    n.conv_kernel = c.get_dims("conv.kernel", n.conv_kernel);
    if (c.has("conv.channels") || c.has("conv.strides")) {
      std::vector<std::size_t> ch;
      for (const auto& l : n.conv) ch.push_back(l.channels);
      ch = c.get_list<std::size_t>("conv.channels", ch);
      std::vector<Dims3> st(ch.size(), Dims3{1, 1, 1});
      for (std::size_t i = 0; i < std::min(st.size(), n.conv.size()); ++i) st[i] = n.conv[i].stride;
      st = c.get_dims_list("conv.strides", st);
      if (st.size() != ch.size()) throw ConfigError("conv.strides must list one stride per conv.channels entry");
      n.conv.clear();
      for (std::size_t i = 0; i < ch.size(); ++i) n.conv.push_back({ch[i], st[i]});
    }
    n.caps1_types = c.get_number<std::size_t>("caps1.types", n.caps1_types);
    n.caps1_kernel = c.get_dims("caps1.kernel", n.caps1_kernel);
    n.pose_relu = c.get_bool("caps1.pose_relu", n.pose_relu);
    n.caps2_types = c.get_number<std::size_t>("caps2.types", n.caps2_types);
    n.caps2_kernel = c.get_dims("caps2.kernel", n.caps2_kernel);
    n.caps2_stride = c.get_dims("caps2.stride", n.caps2_stride);
    n.classes = c.get_number<std::size_t>("classes", n.classes);
    n.routing.iterations = c.get_number<int>("routing.iterations", n.routing.iterations);
    n.routing.inv_temp_start = c.get_number<double>("routing.inv_temp_start", n.routing.inv_temp_start);
    n.routing.inv_temp_end = c.get_number<double>("routing.inv_temp_end", n.routing.inv_temp_end);
    n.routing.variance_floor = c.get_number<double>("routing.variance_floor", n.routing.variance_floor);
    const std::string cost = c.get_string("routing.cost", "standardized");
    if (cost == "standardized") n.routing.cost = RoutingCost::standardized;
    else if (cost == "literal") n.routing.cost = RoutingCost::literal;
    else throw ConfigError("routing.cost must be standardized or literal");
    n.coordinate_addition = c.get_bool("toggle.coordinate_addition", n.coordinate_addition);
    n.capsule_skips = c.get_bool("toggle.capsule_skips", n.capsule_skips);
    n.extra_conv_skips = c.get_bool("toggle.extra_conv_skips", n.extra_conv_skips);
    n.reconstruction_head = c.get_bool("toggle.reconstruction_head", n.reconstruction_head);
    n.extra_skip_layers = c.get_list<std::size_t>("extra_skip.layers", n.extra_skip_layers);
    n.decoder_narrow = c.get_number<std::size_t>("decoder.narrow", n.decoder_narrow);
    n.decoder_wide = c.get_number<std::size_t>("decoder.wide", n.decoder_wide);
    n.transform_init_std = c.get_number<double>("init.transform_std", n.transform_init_std);
    n.loss.lambda = c.get_number<double>("loss.lambda", n.loss.lambda);
    n.loss.reconstruction = c.get_number<double>("loss.reconstruction_weight", n.loss.reconstruction);
    n.loss.classification = c.get_bool("loss.classification", n.loss.classification);
    n.loss.localization = c.get_bool("loss.localization", n.loss.localization);
    n.loss.use_reconstruction = n.reconstruction_head;
    n.margin_start = c.get_number<double>("margin.start", n.margin_start);
    n.margin_end = c.get_number<double>("margin.end", n.margin_end);
    return n;
  }

  // Full key/value rendering; round-trips through from_config.
  Config to_config() const {
    Config c;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    c.set("net.preset", preset);
    c.set("net.input", dims_text(input));
    c.set("net.input_channels", std::to_string(input_channels));
    c.set("conv.kernel", dims_text(conv_kernel));
    std::string ch, st;
    for (std::size_t i = 0; i < conv.size(); ++i) {
      ch += (i ? ", " : "") + std::to_string(conv[i].channels);
      st += (i ? ", " : "") + dims_text(conv[i].stride);
    }
    c.set("conv.channels", ch);
    c.set("conv.strides", st);
    c.set("caps1.types", std::to_string(caps1_types));
    c.set("caps1.kernel", dims_text(caps1_kernel));
    c.set("caps1.pose_relu", b(pose_relu));
    c.set("caps2.types", std::to_string(caps2_types));
    c.set("caps2.kernel", dims_text(caps2_kernel));
    c.set("caps2.stride", dims_text(caps2_stride));
    c.set("classes", std::to_string(classes));
    c.set("routing.iterations", std::to_string(routing.iterations));
    c.set("routing.inv_temp_start", num(routing.inv_temp_start));
    c.set("routing.inv_temp_end", num(routing.inv_temp_end));
    c.set("routing.variance_floor", num(routing.variance_floor));
    c.set("routing.cost", routing.cost == RoutingCost::standardized ? "standardized" : "literal");
    c.set("toggle.coordinate_addition", b(coordinate_addition));
    c.set("toggle.capsule_skips", b(capsule_skips));
    c.set("toggle.extra_conv_skips", b(extra_conv_skips));
    c.set("toggle.reconstruction_head", b(reconstruction_head));
    std::string sk;
    for (std::size_t i = 0; i < extra_skip_layers.size(); ++i) sk += (i ? ", " : "") + std::to_string(extra_skip_layers[i]);
    c.set("extra_skip.layers", sk);
    c.set("decoder.narrow", std::to_string(decoder_narrow));
    c.set("decoder.wide", std::to_string(decoder_wide));
    c.set("init.transform_std", num(transform_init_std));
    c.set("loss.lambda", num(loss.lambda));
    c.set("loss.reconstruction_weight", num(loss.reconstruction));
    c.set("loss.classification", b(loss.classification));
    c.set("loss.localization", b(loss.localization));
    c.set("margin.start", num(margin_start));
    c.set("margin.end", num(margin_end));
    return c;
  }
};

struct LayerShape {
  std::string name;
  Shape shape;
};

// Geometry of one decoder convolution (regular or transposed).
struct DecoderConv {
  std::string name;
  ConvGeometry geom;
  Dims3 in_ext{}, out_ext{};
  std::size_t in_ch = 0, out_ch = 0;
  bool transposed = false;
};

struct ExtraSkip {
  std::size_t conv_layer = 0;  // 0-based source conv layer
  std::size_t stage = 0;       // 0 = after convtr3, k = after up[k-1]
  DecoderConv conv;
};

// Every derived extent and channel count of a configuration.
struct NetworkPlan {
  std::vector<ConvGeometry> conv_geom;
  std::vector<Dims3> conv_in, conv_out;
  Dims3 features{}, caps1{}, caps2{};
  std::size_t fc_in = 0, fc_out = 0;
  DecoderConv tr1, conv1x, tr2, conv2x, tr3, conv3x, recon;
  std::vector<DecoderConv> up;
  std::vector<ExtraSkip> skips;
  std::vector<LayerShape> rows;
};

namespace net_detail {

inline Shape with_channels(const Dims3& d, std::size_t c) { return {d[0], d[1], d[2], c}; }

}  // namespace net_detail

// Derives every layer shape; throws ConfigError naming the first failing layer.
inline NetworkPlan plan_network(const NetworkConfig& cfg) {
  using net_detail::with_channels;
  NetworkPlan p;
  auto fail = [](const std::string& layer, const std::string& why) -> void {
    throw ConfigError("layer " + layer + ": " + why);
  };
  auto guarded = [&](const std::string& layer, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      throw ConfigError("layer " + layer + ": " + e.what());
    }
  };
  if (cfg.conv.empty()) fail("conv1", "conv stack is empty");
  if (cfg.classes == 0) fail("class_caps", "classes must be positive");
  if (cfg.caps1_types == 0 || cfg.caps2_types == 0) fail("caps1", "capsule types must be positive");
  if (cfg.decoder_narrow == 0 || cfg.decoder_wide == 0) fail("fc", "decoder widths must be positive");
  for (int a = 0; a < 3; ++a)
    if (cfg.input[a] == 0) fail("input", "extents must be positive");
  guarded("routing", [&] {
    cfg.routing.validate();
    return 0;
  });

  Dims3 ext = cfg.input;
  std::size_t ch = cfg.input_channels;
  p.rows.push_back({"input", with_channels(ext, ch)});
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    const auto& l = cfg.conv[i];
    if (l.channels == 0) fail(name, "channels must be positive");
    ConvGeometry g{cfg.conv_kernel, l.stride, same_padding(ext, cfg.conv_kernel, l.stride)};
    const Dims3 out = guarded(name, [&] { return conv_output_extent(ext, g); });
    p.conv_geom.push_back(g);
    p.conv_in.push_back(ext);
    p.conv_out.push_back(out);
    ext = out;
    ch = l.channels;
    p.rows.push_back({name, with_channels(ext, ch)});
  }
  p.features = ext;
  p.caps1 = guarded("caps1", [&] { return conv_output_extent(ext, ConvGeometry{cfg.caps1_kernel}); });
  p.rows.push_back({"caps1", with_channels(p.caps1, cfg.caps1_types)});
  p.caps2 = guarded("caps2", [&] { return conv_output_extent(p.caps1, ConvGeometry{cfg.caps2_kernel, cfg.caps2_stride}); });
  p.rows.push_back({"caps2", with_channels(p.caps2, cfg.caps2_types)});
  p.rows.push_back({"class_caps", Shape{cfg.classes, 4, 4}});

  p.fc_in = cfg.classes * kPoseDim;
  p.fc_out = p.caps2[0] * p.caps2[1] * p.caps2[2];
  p.rows.push_back({"fc", with_channels(p.caps2, 1)});

  const Dims3 k133{1, 3, 3}, one{1, 1, 1};
  auto same = [&](const std::string& name, Dims3 e, std::size_t cin, std::size_t cout) {
    DecoderConv d{name, ConvGeometry{k133, one, same_padding(e, k133, one)}, e, e, cin, cout, false};
    guarded(name, [&] { return conv_output_extent(e, d.geom); });
    return d;
  };
  auto transposed = [&](const std::string& name, Dims3 in, Dims3 out, Dims3 k, Dims3 s, Padding3 pad,
                        std::size_t cin, std::size_t cout) {
    DecoderConv d{name, ConvGeometry{k, s, pad}, in, out, cin, cout, true};
    const Dims3 got = guarded(name, [&] { return transposed_output_extent(in, d.geom); });
    if (got != out) fail(name, "produces " + dims_str(got) + ", expected " + dims_str(out));
    return d;
  };

  const std::size_t nw = cfg.decoder_narrow, ww = cfg.decoder_wide;
  p.tr1 = transposed("convtr1", p.caps2, p.caps2, k133, one, same_padding(p.caps2, k133, one), 1, nw);
  p.rows.push_back({"convtr1", with_channels(p.caps2, nw)});
  std::size_t dch = nw;
  if (cfg.capsule_skips) {
    p.conv1x = same("conv1x", p.caps2, cfg.caps2_types * kPoseDim, nw);
    p.rows.push_back({"conv1x", with_channels(p.caps2, nw)});
    dch += nw;
    p.rows.push_back({"concat1", with_channels(p.caps2, dch)});
  }
  // ConvTr2 mirrors Conv Caps2; ConvTr3 mirrors Conv Caps1.
  Dims3 k2{};
  for (int a = 0; a < 3; ++a) {
    const std::size_t span = (p.caps2[a] - 1) * cfg.caps2_stride[a];
    if (p.caps1[a] <= span) fail("convtr2", "cannot restore caps1 extent " + dims_str(p.caps1));
    k2[a] = p.caps1[a] - span;
  }
  p.tr2 = transposed("convtr2", p.caps2, p.caps1, k2, cfg.caps2_stride, Padding3::valid(), dch, nw);
  p.rows.push_back({"convtr2", with_channels(p.caps1, nw)});
  dch = nw;
  if (cfg.capsule_skips) {
    p.conv2x = same("conv2x", p.caps1, cfg.caps1_types * kPoseDim, nw);
    p.rows.push_back({"conv2x", with_channels(p.caps1, nw)});
    dch += nw;
    p.rows.push_back({"concat2", with_channels(p.caps1, dch)});
  }
  p.tr3 = transposed("convtr3", p.caps1, p.features, cfg.caps1_kernel, one, Padding3::valid(), dch, ww);
  p.rows.push_back({"convtr3", with_channels(p.features, ww)});

  // One upsampling stage per strided conv, innermost first.
  std::vector<Dims3> stage_ext{p.features};
  Dims3 cur = p.features;
  std::size_t up_index = 4;
  for (std::size_t i = cfg.conv.size(); i-- > 0;) {
    const Dims3 s = cfg.conv[i].stride;
    if (s == one) continue;
    const std::string name = "convtr" + std::to_string(up_index++);
    const Dims3 target = p.conv_in[i];
    DecoderConv d = transposed(name, cur, target, k133, s, same_padding(target, k133, s), ww, ww);
    p.up.push_back(d);
    cur = target;
    stage_ext.push_back(cur);
    p.rows.push_back({name, with_channels(cur, ww)});
  }
  if (cur != cfg.input) fail("conv3x", "decoder ends at " + dims_str(cur) + ", input is " + dims_str(cfg.input));

  std::vector<std::size_t> stage_ch(stage_ext.size(), ww);
  if (cfg.extra_conv_skips) {
    for (std::size_t layer : cfg.extra_skip_layers) {
      const std::string name = "skip_conv" + std::to_string(layer);
      if (layer == 0 || layer > cfg.conv.size()) fail(name, "no such conv layer");
      const Dims3 e = p.conv_out[layer - 1];
      auto it = std::find(stage_ext.begin(), stage_ext.end(), e);
      if (it == stage_ext.end()) fail(name, "no decoder stage with extent " + dims_str(e));
      const std::size_t stage = static_cast<std::size_t>(it - stage_ext.begin());
      p.skips.push_back({layer - 1, stage, same(name, e, cfg.conv[layer - 1].channels, ww)});
      stage_ch[stage] += ww;
    }
    std::stable_sort(p.skips.begin(), p.skips.end(), [](const ExtraSkip& a, const ExtraSkip& b) { return a.stage < b.stage; });
    for (auto& u : p.up) u.in_ch = 0;
    for (std::size_t k = 0; k < p.up.size(); ++k) p.up[k].in_ch = stage_ch[k];
  }
  p.conv3x = same("conv3x", cfg.input, stage_ch.back(), 1);
  p.rows.push_back({"conv3x", with_channels(cfg.input, 1)});
  if (cfg.reconstruction_head) {
    p.recon = same("reconstruction", cfg.input, stage_ch.back(), cfg.input_channels);
    p.rows.push_back({"reconstruction", with_channels(cfg.input, cfg.input_channels)});
  }
  return p;
}

// Named parameter tensors in a fixed order.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw UsageError("parameter '" + name + "' already exists");
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return tensors_[it->second];
  }

  // Replaces values; the shape is fixed at build time.
  void set(const std::string& name, Tensor<T> t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    if (t.shape() != tensors_[it->second].shape()) {
      throw UsageError("parameter '" + name + "': shape " + shape_str(t.shape()) + " differs from " +
                       shape_str(tensors_[it->second].shape()));
    }
    tensors_[it->second] = std::move(t);
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor<T>>& tensors() const noexcept { return tensors_; }
  std::vector<Tensor<T>>& tensors() noexcept { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    out.step = step;
    return out;
  }

  bool operator==(const ParameterStore& o) const { return names_ == o.names_ && tensors_ == o.tensors_ && step == o.step; }

  std::uint64_t step = 0;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

namespace net_detail {

template <typename T>
Tensor<T> he_normal(Shape shape, double fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
  for (T& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

inline Shape kernel_shape(const Dims3& k, std::size_t a, std::size_t b) { return {k[0], k[1], k[2], a, b}; }
inline double kvol(const Dims3& k) { return static_cast<double>(k[0] * k[1] * k[2]); }

template <typename T>
void add_decoder_conv(ParameterStore<T>& ps, const DecoderConv& d, std::mt19937_64& rng) {
  if (d.transposed) {
    // Transposed kernels are stored as [k, C_out, C_in] (adjoint layout).
    const double stride_vol = kvol(d.geom.stride);
    ps.add(d.name + ".kernel",
           he_normal<T>(kernel_shape(d.geom.kernel, d.out_ch, d.in_ch), kvol(d.geom.kernel) * d.in_ch / stride_vol, rng));
  } else {
    ps.add(d.name + ".kernel", he_normal<T>(kernel_shape(d.geom.kernel, d.in_ch, d.out_ch), kvol(d.geom.kernel) * d.in_ch, rng));
  }
  ps.add(d.name + ".bias", Tensor<T>::zeros({d.out_ch}));
}

}  // namespace net_detail

// Deterministic initialization from `seed`.
template <typename T>
ParameterStore<T> build(const NetworkConfig& cfg, std::uint64_t seed) {
  using namespace net_detail;
  const NetworkPlan p = plan_network(cfg);
  std::mt19937_64 rng(seed);
  ParameterStore<T> ps;
  std::size_t cin = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    const std::size_t cout = cfg.conv[i].channels;
    ps.add(name + ".kernel", he_normal<T>(kernel_shape(cfg.conv_kernel, cin, cout), kvol(cfg.conv_kernel) * cin, rng));
    ps.add(name + ".bias", Tensor<T>::zeros({cout}));
    cin = cout;
  }
  const double fan = kvol(cfg.caps1_kernel) * cin;
  ps.add("caps1.pose_kernel", he_normal<T>(kernel_shape(cfg.caps1_kernel, cin, cfg.caps1_types * kPoseDim), fan, rng));
  ps.add("caps1.pose_bias", Tensor<T>::zeros({cfg.caps1_types * kPoseDim}));
  ps.add("caps1.act_kernel", he_normal<T>(kernel_shape(cfg.caps1_kernel, cin, cfg.caps1_types), fan, rng));
  ps.add("caps1.act_bias", Tensor<T>::zeros({cfg.caps1_types}));
  auto routed = [&](const std::string& name, std::size_t c_in, std::size_t c_out) {
    ps.add(name + ".transforms",
           TransformBank<double>::identity_with_noise(c_in, c_out, cfg.transform_init_std, rng).weights.template cast<T>());
    ps.add(name + ".beta_u", Tensor<T>::zeros({c_out}));
    ps.add(name + ".beta_a", Tensor<T>::zeros({c_out}));
  };
  routed("caps2", cfg.caps1_types, cfg.caps2_types);
  routed("class", cfg.caps2_types, cfg.classes);
  ps.add("fc.weight", he_normal<T>({p.fc_in, p.fc_out}, static_cast<double>(p.fc_in), rng));
  ps.add("fc.bias", Tensor<T>::zeros({p.fc_out}));
  add_decoder_conv(ps, p.tr1, rng);
  if (cfg.capsule_skips) add_decoder_conv(ps, p.conv1x, rng);
  add_decoder_conv(ps, p.tr2, rng);
  if (cfg.capsule_skips) add_decoder_conv(ps, p.conv2x, rng);
  add_decoder_conv(ps, p.tr3, rng);
  for (const auto& u : p.up) add_decoder_conv(ps, u, rng);
  for (const auto& s : p.skips) add_decoder_conv(ps, s.conv, rng);
  add_decoder_conv(ps, p.conv3x, rng);
  if (cfg.reconstruction_head) add_decoder_conv(ps, p.recon, rng);
  return ps;
}

// Parameters placed on a tape, by name.
template <typename T>
class BoundParams {
 public:
  BoundParams(const ParameterStore<T>& ps, Tape<T>& tape, bool trainable) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Var<T> v = trainable ? tape.variable(ps.tensors()[i]) : tape.constant(ps.tensors()[i]);
      vars_.emplace(ps.names()[i], v);
      order_.push_back(v);
    }
  }

  // Substitutes a caller-made variable (e.g. the coordinate of a gradient check).
  void rebind(const std::string& name, const Var<T>& v) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw UsageError("unbound parameter '" + name + "'");
    for (auto& o : order_)
      if (o.id() == it->second.id()) o = v;
    it->second = v;
  }

  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw UsageError("unbound parameter '" + name + "'");
    return it->second;
  }

  // Gradients in store order, after tape.backward().
  std::vector<Tensor<T>> gradients() const {
    std::vector<Tensor<T>> g;
    g.reserve(order_.size());
    for (const auto& v : order_) g.push_back(v.tape().grad(v));
    return g;
  }

 private:
  std::map<std::string, Var<T>> vars_;
  std::vector<Var<T>> order_;
};

template <typename T>
struct NetOutput {
  Var<T> class_activations;  // [N]
  Var<T> class_poses;        // [N,4,4]
  Var<T> loc_logits;         // [T,H,W]
  std::optional<Var<T>> reconstruction;  // [T,H,W,C]
  CapsuleGrid<T> caps1, caps2;
  std::vector<Var<T>> conv_features;
};

namespace net_detail {

template <typename T>
Var<T> apply(const BoundParams<T>& bp, const DecoderConv& d, const Var<T>& x, bool relu) {
  Tape<T>& tape = x.tape();
  tape.set_scope(d.name);
  Var<T> y = d.transposed ? ops::conv3d_transposed(x, bp[d.name + ".kernel"], d.geom)
                          : ops::conv3d(x, bp[d.name + ".kernel"], d.geom);
  y = ops::add_bias(y, bp[d.name + ".bias"]);
  return relu ? ops::relu(y) : y;
}

template <typename T>
Var<T> flatten_poses(const CapsuleGrid<T>& g) {
  const auto e = g.extents();
  return ops::reshape(g.pose, Shape{e[0], e[1], e[2], g.types() * kPoseDim});
}

}  // namespace net_detail

// Full forward pass. `target` selects training-mode masking; without it the
// largest class activation is kept.
template <typename T>
NetOutput<T> forward(const NetworkConfig& cfg, const NetworkPlan& p, const BoundParams<T>& bp, Tape<T>& tape,
                     const Tensor<T>& video, std::optional<std::size_t> target = std::nullopt,
                     VoteCounter* counter = nullptr) {
  using net_detail::apply;
  const Shape expect = net_detail::with_channels(cfg.input, cfg.input_channels);
  if (video.shape() != expect) {
    throw ConfigError("forward: video " + shape_str(video.shape()) + " does not match " + shape_str(expect));
  }
  if (target && *target >= cfg.classes) throw UsageError("forward: target class out of range");
  NetOutput<T> out;
  Var<T> x = tape.constant(video);
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    tape.set_scope(name);
    x = ops::relu(ops::add_bias(ops::conv3d(x, bp[name + ".kernel"], p.conv_geom[i]), bp[name + ".bias"]));
    out.conv_features.push_back(x);
  }
  tape.set_scope("caps1");
  out.caps1 = primary_capsules(x, bp["caps1.pose_kernel"], bp["caps1.pose_bias"], bp["caps1.act_kernel"],
                               bp["caps1.act_bias"], cfg.pose_relu);
  tape.set_scope("caps2");
  out.caps2 = conv_capsule_layer(out.caps1, cfg.caps2_kernel, cfg.caps2_stride,
                                 RoutingParams<T>{bp["caps2.transforms"], bp["caps2.beta_u"], bp["caps2.beta_a"]},
                                 cfg.routing, counter);
  tape.set_scope("class_caps");
  ClassCapsules<T> cls = class_capsules(out.caps2,
                                        RoutingParams<T>{bp["class.transforms"], bp["class.beta_u"], bp["class.beta_a"]},
                                        cfg.routing, cfg.coordinate_addition, counter);
  out.class_activations = cls.activation;
  out.class_poses = cls.pose;

  tape.set_scope("fc");
  Var<T> d = mask_poses(cls, target);
  d = ops::relu(ops::linear(d, bp["fc.weight"], bp["fc.bias"]));
  d = ops::reshape(d, net_detail::with_channels(p.caps2, 1));
  d = apply(bp, p.tr1, d, true);
  if (cfg.capsule_skips) d = ops::concat_last(d, apply(bp, p.conv1x, net_detail::flatten_poses(out.caps2), true));
  d = apply(bp, p.tr2, d, true);
  if (cfg.capsule_skips) d = ops::concat_last(d, apply(bp, p.conv2x, net_detail::flatten_poses(out.caps1), true));
  d = apply(bp, p.tr3, d, true);
  auto attach = [&](std::size_t stage) {
    for (const auto& s : p.skips)
      if (s.stage == stage) d = ops::concat_last(d, apply(bp, s.conv, out.conv_features[s.conv_layer], true));
  };
  attach(0);
  for (std::size_t k = 0; k < p.up.size(); ++k) {
    d = apply(bp, p.up[k], d, true);
    attach(k + 1);
  }
  Var<T> logits = apply(bp, p.conv3x, d, false);
  out.loc_logits = ops::reshape(logits, Shape{cfg.input[0], cfg.input[1], cfg.input[2]});
  if (cfg.reconstruction_head) out.reconstruction = ops::sigmoid(apply(bp, p.recon, d, false));
  tape.set_scope("");
  return out;
}

struct Prediction {
  std::size_t class_id = 0;
  double confidence = 0.0;
  Tensor<std::uint8_t> mask;  // [T,H,W], 1 where sigmoid(F) >= 0.5
};

template <typename T>
Prediction predict_from(const Tensor<T>& class_activations, const Tensor<T>& loc_logits) {
  Prediction pr;
  const auto a = class_activations.data();
  pr.class_id = static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
  pr.confidence = static_cast<double>(a[pr.class_id]);
  pr.mask = Tensor<std::uint8_t>(loc_logits.shape());
  for (std::size_t i = 0; i < loc_logits.size(); ++i) {
    pr.mask[i] = ops::stable_sigmoid(loc_logits[i]) >= T{0.5} ? 1 : 0;
  }
  return pr;
}

// Eval-mode forward and decision.
template <typename T>
Prediction predict(const NetworkConfig& cfg, const NetworkPlan& p, const ParameterStore<T>& ps, const Tensor<T>& video) {
  Tape<T> tape;
  BoundParams<T> bp(ps, tape, false);
  NetOutput<T> out = forward(cfg, p, bp, tape, video);
  return predict_from(out.class_activations.value(), out.loc_logits.value());
}

}  // namespace vcaps
