#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vcaps/config.hpp"
#include "vcaps/io.hpp"
#include "vcaps/loss.hpp"
#include "vcaps/metrics.hpp"
#include "vcaps/net.hpp"
#include "vcaps/synthgen.hpp"

namespace vcaps {

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure by index order.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 8;
  std::size_t epochs = 10;
  std::uint64_t max_steps = 0;  // 0: epochs decide
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 0.0;       // 0: off
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::uint64_t checkpoint_every = 250;
  std::uint64_t eval_every = 250;
  std::size_t eval_samples = 200;  // holdout videos scored at each eval point

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"train.lr", "train.batch", "train.epochs", "train.max_steps",
                                         "train.beta1", "train.beta2", "train.eps", "train.clip_norm",
                                         "train.seed", "train.threads", "train.checkpoint_every",
                                         "train.eval_every", "train.eval_samples"};
    return k;
  }

  static TrainConfig from_config(const Config& c) {
    TrainConfig t;
    t.lr = c.get_number<double>("train.lr", t.lr);
    t.batch = c.get_number<std::size_t>("train.batch", t.batch);
    t.epochs = c.get_number<std::size_t>("train.epochs", t.epochs);
    t.max_steps = c.get_number<std::uint64_t>("train.max_steps", t.max_steps);
    t.beta1 = c.get_number<double>("train.beta1", t.beta1);
    t.beta2 = c.get_number<double>("train.beta2", t.beta2);
    t.eps = c.get_number<double>("train.eps", t.eps);
    t.clip_norm = c.get_number<double>("train.clip_norm", t.clip_norm);
    t.seed = c.get_number<std::uint64_t>("train.seed", t.seed);
    t.threads = c.get_number<unsigned>("train.threads", t.threads);
    t.checkpoint_every = c.get_number<std::uint64_t>("train.checkpoint_every", t.checkpoint_every);
    t.eval_every = c.get_number<std::uint64_t>("train.eval_every", t.eval_every);
    t.eval_samples = c.get_number<std::size_t>("train.eval_samples", t.eval_samples);
    t.validate();
    return t;
  }

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
    if (batch == 0) throw ConfigError("train.batch must be positive");
    if (epochs == 0 && max_steps == 0) throw ConfigError("train.epochs or train.max_steps must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0,1)");
    if (!(eps > 0)) throw ConfigError("train.eps must be positive");
    if (clip_norm < 0) throw ConfigError("train.clip_norm must be >= 0");
    if (threads == 0) throw ConfigError("train.threads must be positive");
  }

  std::uint64_t steps_per_epoch(std::size_t n) const { return (n + batch - 1) / batch; }

  std::uint64_t total_steps(std::size_t n) const {
    return max_steps ? max_steps : static_cast<std::uint64_t>(epochs) * steps_per_epoch(n);
  }
};

// Adam with bias correction; moments live alongside the parameters they update.
template <typename T>
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<Tensor<T>> m, v;

  void init(const ParameterStore<T>& ps) {
    m.clear();
    v.clear();
    for (const auto& p : ps.tensors()) {
      m.push_back(Tensor<T>(p.shape()));
      v.push_back(Tensor<T>(p.shape()));
    }
    t = 0;
  }

  void step(ParameterStore<T>& ps, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != ps.size() || m.size() != ps.size()) throw UsageError("adam: gradient count mismatch");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < ps.size(); ++k) {
      Tensor<T>& p = ps.tensors()[k];
      const Tensor<T>& g = grads[k];
      if (g.empty()) continue;
      T* pm = m[k].raw();
      T* pv = v[k].raw();
      T* pp = p.raw();
      const T* pg = g.raw();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(pg[i]);
        pm[i] = static_cast<T>(beta1 * static_cast<double>(pm[i]) + (1 - beta1) * gi);
        pv[i] = static_cast<T>(beta2 * static_cast<double>(pv[i]) + (1 - beta2) * gi * gi);
        const double mh = static_cast<double>(pm[i]) / c1, vh = static_cast<double>(pv[i]) / c2;
        pp[i] = static_cast<T>(static_cast<double>(pp[i]) - lr * mh / (std::sqrt(vh) + eps));
      }
    }
    ++ps.step;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: "VCK1" | u32 LE header length | JSON header | tensor records
// (parameters in store order, then Adam first and second moments).

struct CheckpointHeader {
  std::string config_text;  // canonical network config
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::vector<std::string> names;
};

template <typename T>
struct Checkpoint {
  CheckpointHeader header;
  ParameterStore<T> params;
  Adam<T> adam;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'C', 'K', '1'};

inline std::uint64_t config_hash(const NetworkConfig& cfg) { return cfg.to_config().hash(); }

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg, const ParameterStore<T>& ps,
                     const Adam<T>& adam, std::uint64_t seed, const std::string& dataset_hash) {
  nlohmann::json h{{"config", cfg.to_config().canonical()},
                   {"config_hash", hex64(config_hash(cfg))},
                   {"step", ps.step},
                   {"adam_t", adam.t},
                   {"seed", seed},
                   {"dataset_hash", dataset_hash},
                   {"names", ps.names()},
                   {"moments", !adam.m.empty()}};
  const std::string text = h.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic.data(), 4);
    const auto n = static_cast<std::uint32_t>(text.size());
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((n >> (8 * i)) & 0xff));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ps.tensors()) io::write_tensor(os, t);
    for (const auto& t : adam.m) io::write_tensor(os, t);
    for (const auto& t : adam.v) io::write_tensor(os, t);
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kCheckpointMagic) throw IoError(path.string() + ": not a checkpoint (bad magic)");
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(is.get())) << (8 * i);
  std::string text(n, '\0');
  is.read(text.data(), n);
  if (!is) throw IoError(path.string() + ": truncated header");
  Checkpoint<T> ck;
  try {
    const auto h = nlohmann::json::parse(text);
    ck.header.config_text = h.at("config");
    ck.header.config_hash = std::stoull(h.at("config_hash").get<std::string>(), nullptr, 16);
    ck.header.step = h.at("step");
    ck.header.adam_t = h.at("adam_t");
    ck.header.seed = h.at("seed");
    ck.header.dataset_hash = h.at("dataset_hash");
    ck.header.names = h.at("names").get<std::vector<std::string>>();
    const bool moments = h.at("moments");
    for (const auto& name : ck.header.names) ck.params.add(name, io::read_tensor<T>(is));
    if (moments) {
      for (std::size_t i = 0; i < ck.header.names.size(); ++i) ck.adam.m.push_back(io::read_tensor<T>(is));
      for (std::size_t i = 0; i < ck.header.names.size(); ++i) ck.adam.v.push_back(io::read_tensor<T>(is));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  ck.params.step = ck.header.step;
  ck.adam.t = ck.header.adam_t;
  return ck;
}

inline NetworkConfig checkpoint_network(const CheckpointHeader& h) {
  const NetworkConfig cfg = NetworkConfig::from_config(Config::parse(h.config_text));
  if (config_hash(cfg) != h.config_hash) throw IoError("checkpoint config text does not match its recorded hash");
  return cfg;
}

// ---------------------------------------------------------------------------
// Per-sample loss and gradients.

template <typename T>
struct SampleResult {
  double loss = 0, classification = 0, localization = 0, reconstruction = 0;
  std::vector<Tensor<T>> grads;
};

template <typename T>
SampleResult<T> sample_gradients(const NetworkConfig& cfg, const NetworkPlan& plan, const ParameterStore<T>& ps,
                                 const synth::VideoSample& s, double margin) {
  Tape<T> tape;
  BoundParams<T> bp(ps, tape, true);
  const Tensor<T> video = s.frames.template cast<T>();
  NetOutput<T> out = forward(cfg, plan, bp, tape, video, s.label);
  LossComponents<T> c;
  SampleResult<T> r;
  if (cfg.loss.classification) {
    c.classification = spread_loss(out.class_activations, s.label, static_cast<T>(margin));
    r.classification = static_cast<double>(c.classification->value()[0]);
  }
  if (cfg.loss.localization) {
    c.localization = localization_loss(out.loc_logits, s.mask.template cast<T>());
    r.localization = static_cast<double>(c.localization->value()[0]);
  }
  if (cfg.loss.use_reconstruction && out.reconstruction) {
    c.reconstruction = reconstruction_loss(*out.reconstruction, video);
    r.reconstruction = static_cast<double>(c.reconstruction->value()[0]);
  }
  Var<T> total = total_loss(c, cfg.loss);
  r.loss = static_cast<double>(total.value()[0]);
  if (!std::isfinite(r.loss)) throw NumericError("non-finite loss for sample with label " + std::to_string(s.label));
  tape.backward(total);
  r.grads = bp.gradients();
  return r;
}

// ---------------------------------------------------------------------------
// Inference and evaluation.

struct Inference {
  Prediction prediction;
  std::vector<double> activations;
  std::vector<double> pose;  // 16 entries of the predicted class capsule
};

template <typename T>
Inference infer(const NetworkConfig& cfg, const NetworkPlan& plan, const ParameterStore<T>& ps,
                const Tensor<float>& frames) {
  Tape<T> tape;
  BoundParams<T> bp(ps, tape, false);
  NetOutput<T> out = forward(cfg, plan, bp, tape, frames.template cast<T>());
  Inference r;
  r.prediction = predict_from(out.class_activations.value(), out.loc_logits.value());
  for (T a : out.class_activations.value().data()) r.activations.push_back(static_cast<double>(a));
  const Tensor<T>& poses = out.class_poses.value();
  for (std::size_t i = 0; i < kPoseDim; ++i) r.pose.push_back(static_cast<double>(poses[r.prediction.class_id * kPoseDim + i]));
  return r;
}

inline Tensor<std::uint8_t> binary_mask(const Tensor<float>& m) {
  Tensor<std::uint8_t> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] > 0.5f ? 1 : 0;
  return out;
}

template <typename T>
metrics::EvalReport evaluate_model(const NetworkConfig& cfg, const NetworkPlan& plan, const ParameterStore<T>& ps,
                                   const std::vector<synth::VideoSample>& samples, unsigned threads,
                                   std::size_t limit = 0, metrics::Overlap mode = metrics::Overlap::mask) {
  const std::size_t n = limit ? std::min(limit, samples.size()) : samples.size();
  std::vector<metrics::Detection> dets(n);
  std::vector<metrics::GroundTruth> gts(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const Inference r = infer(cfg, plan, ps, samples[i].frames);
    dets[i] = {i, r.prediction.class_id, r.prediction.confidence, r.prediction.mask};
    gts[i] = {i, samples[i].label, binary_mask(samples[i].mask)};
  });
  return metrics::evaluate(dets, gts, cfg.classes, 0.5, {0.1, 0.2, 0.3, 0.5}, mode);
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainLogRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0, classification = 0, localization = 0, reconstruction = 0;
  double margin = 0;
  std::optional<double> holdout_accuracy;
};

inline std::string format_log_row(const TrainLogRow& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << "," << r.epoch << "," << r.loss << "," << r.classification << ","
     << r.localization << "," << r.reconstruction << "," << r.margin << ",";
  if (r.holdout_accuracy) os << *r.holdout_accuracy;
  return os.str();
}

inline constexpr const char* kLogHeader = "step,epoch,loss,L_c,L_s,L_r,margin,holdout_accuracy";

struct TrainPaths {
  std::filesystem::path checkpoint;  // latest checkpoint, rewritten in place
  std::filesystem::path log;         // CSV, appended on resume
};

struct TrainOutcome {
  std::uint64_t steps = 0;
  double last_loss = 0;
  std::optional<double> last_holdout_accuracy;
};

// Example order for an epoch: a seeded permutation, identical on every run.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  return idx;
}

template <typename T>
class Trainer {
 public:
  using Progress = std::function<void(const TrainLogRow&)>;

  Trainer(NetworkConfig cfg, TrainConfig tc) : cfg_(std::move(cfg)), tc_(tc), plan_(plan_network(cfg_)) { tc_.validate(); }

  void init(std::uint64_t seed) {
    params_ = build<T>(cfg_, seed);
    reset_adam();
  }

  // Restores parameters, moments and step; the network config must match.
  void resume(const std::filesystem::path& path) {
    Checkpoint<T> ck = load_checkpoint<T>(path);
    if (ck.header.config_hash != config_hash(cfg_)) {
      throw ConfigError("checkpoint " + path.string() + " was written for config " + hex64(ck.header.config_hash) +
                        ", current config is " + hex64(config_hash(cfg_)));
    }
    ParameterStore<T> fresh = build<T>(cfg_, 0);
    if (fresh.names() != ck.params.names()) throw ConfigError("checkpoint parameter layout differs from the config");
    params_ = std::move(ck.params);
    reset_adam();
    if (!ck.adam.m.empty()) {
      adam_.m = std::move(ck.adam.m);
      adam_.v = std::move(ck.adam.v);
    }
    adam_.t = ck.adam.t;
  }

  TrainOutcome run(const std::vector<synth::VideoSample>& train, const std::vector<synth::VideoSample>* holdout,
                   const TrainPaths& paths, const std::string& dataset_hash, const Progress& progress = {}) {
    if (train.empty()) throw ConfigError("training set is empty");
    const std::uint64_t per_epoch = tc_.steps_per_epoch(train.size());
    const std::uint64_t total = tc_.total_steps(train.size());
    const MarginSchedule schedule{cfg_.margin_start, cfg_.margin_end, total};
    schedule.validate();
    const bool fresh_log = params_.step == 0 || !std::filesystem::exists(paths.log);
    if (!fresh_log) truncate_log(paths.log, params_.step);
    std::ofstream log(paths.log, fresh_log ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open training log " + paths.log.string());
    if (fresh_log) log << kLogHeader << "\n";
    TrainOutcome outcome;
    std::vector<std::size_t> order;
    std::uint64_t order_epoch = ~0ULL;
    while (params_.step < total) {
      const std::uint64_t step = params_.step;
      const std::uint64_t epoch = step / per_epoch;
      if (epoch != order_epoch) order = epoch_order(train.size(), tc_.seed, epoch), order_epoch = epoch;
      const std::size_t begin = static_cast<std::size_t>((step % per_epoch) * tc_.batch);
      const std::size_t end = std::min(train.size(), begin + tc_.batch);
      const double margin = schedule.margin(step);
      std::vector<SampleResult<T>> results(end - begin);
      parallel_for(end - begin, tc_.threads, [&](std::size_t i) {
        results[i] = sample_gradients(cfg_, plan_, params_, train[order[begin + i]], margin);
      });
      // Reduce in batch order so the sum is independent of thread count.
      TrainLogRow row;
      row.step = step + 1;
      row.epoch = epoch;
      row.margin = margin;
      std::vector<Tensor<T>> grads = std::move(results[0].grads);
      for (std::size_t i = 1; i < results.size(); ++i)
        for (std::size_t k = 0; k < grads.size(); ++k) accumulate(grads[k], results[i].grads[k]);
      const double inv = 1.0 / static_cast<double>(results.size());
      for (auto& g : grads)
        for (T& x : g.data()) x = static_cast<T>(static_cast<double>(x) * inv);
      for (const auto& r : results) {
        row.loss += r.loss * inv;
        row.classification += r.classification * inv;
        row.localization += r.localization * inv;
        row.reconstruction += r.reconstruction * inv;
      }
      double norm2 = 0;
      for (const auto& g : grads)
        for (T x : g.data()) norm2 += static_cast<double>(x) * static_cast<double>(x);
      if (!std::isfinite(norm2) || !std::isfinite(row.loss)) {
        throw NumericError("non-finite loss or gradient at step " + std::to_string(row.step) +
                           "; last good checkpoint kept at " + paths.checkpoint.string());
      }
      if (tc_.clip_norm > 0 && norm2 > tc_.clip_norm * tc_.clip_norm) {
        const double s = tc_.clip_norm / std::sqrt(norm2);
        for (auto& g : grads)
          for (T& x : g.data()) x = static_cast<T>(static_cast<double>(x) * s);
      }
      adam_.step(params_, grads);
      for (const auto& p : params_.tensors())
        if (!p.all_finite())
          throw NumericError("non-finite parameters after step " + std::to_string(row.step) +
                             "; last good checkpoint kept at " + paths.checkpoint.string());
      const bool last = params_.step == total;
      if (holdout && !holdout->empty() && tc_.eval_every && (params_.step % tc_.eval_every == 0 || last)) {
        row.holdout_accuracy = evaluate_model(cfg_, plan_, params_, *holdout, tc_.threads, tc_.eval_samples).accuracy;
        outcome.last_holdout_accuracy = row.holdout_accuracy;
      }
      log << format_log_row(row) << "\n" << std::flush;
      if (progress) progress(row);
      if ((tc_.checkpoint_every && params_.step % tc_.checkpoint_every == 0) || last)
        save_checkpoint(paths.checkpoint, cfg_, params_, adam_, tc_.seed, dataset_hash);
      outcome.last_loss = row.loss;
    }
    outcome.steps = params_.step;
    return outcome;
  }

  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }
  const Adam<T>& adam() const { return adam_; }
  const NetworkPlan& plan() const { return plan_; }
  const NetworkConfig& config() const { return cfg_; }
  const TrainConfig& train_config() const { return tc_; }

 private:
  // Drops rows written after the checkpoint being resumed.
  static void truncate_log(const std::filesystem::path& path, std::uint64_t step) {
    std::ifstream in(path);
    std::vector<std::string> keep;
    for (std::string line; std::getline(in, line);) {
      if (!keep.empty()) {
        const auto comma = line.find(',');
        if (comma == std::string::npos || std::stoull(line.substr(0, comma)) > step) break;
      }
      keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot rewrite training log " + path.string());
    for (const auto& l : keep) out << l << "\n";
  }

  static void accumulate(Tensor<T>& into, const Tensor<T>& g) {
    if (g.empty()) return;
    if (into.empty()) {
      into = g;
      return;
    }
    T* a = into.raw();
    const T* b = g.raw();
    for (std::size_t i = 0; i < into.size(); ++i) a[i] += b[i];
  }

  void reset_adam() {
    adam_ = Adam<T>{tc_.lr, tc_.beta1, tc_.beta2, tc_.eps, 0, {}, {}};
    adam_.init(params_);
  }

  NetworkConfig cfg_;
  TrainConfig tc_;
  NetworkPlan plan_;
  ParameterStore<T> params_;
  Adam<T> adam_;
};

}  // namespace vcaps
