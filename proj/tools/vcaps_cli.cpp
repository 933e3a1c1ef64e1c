// vcaps: data generation, training, evaluation, probing, benchmarking and
// self-checks for the video capsule network.
//
// Exit codes: 0 success, 1 validation, 2 runtime or numeric failure, 3 check failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vcaps/bench.hpp"
#include "vcaps/checks.hpp"
#include "vcaps/probe.hpp"
#include "vcaps/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vcaps;

namespace {

constexpr int kOk = 0, kValidation = 1, kRuntime = 2, kCheckFailed = 3;
constexpr const char* kVersion = "0.1.0";

class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now(const char* format) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, format);
  return os.str();
}

// A run directory, created exclusively, holding every artifact of one
// invocation plus run.json.
class Run {
 public:
  Run(const std::string& command, const std::string& root_flag, const std::string& explicit_dir,
      const std::vector<std::string>& argv)
      : command_(command) {
    if (!explicit_dir.empty()) {
      dir_ = explicit_dir;
      if (dir_.has_parent_path()) fs::create_directories(dir_.parent_path());
      if (!fs::create_directory(dir_)) throw IoError("run directory " + dir_.string() + " already exists");
    } else {
      const char* env = std::getenv("VCAPS_OUTPUT_ROOT");
      const fs::path root = !root_flag.empty() ? fs::path(root_flag) : env && *env ? fs::path(env) : fs::path("runs");
      fs::create_directories(root);
      const std::string stem = command + "-" + utc_now("%Y%m%d-%H%M%S");
      for (int k = 0;; ++k) {
        dir_ = root / (k ? stem + "-" + std::to_string(k) : stem);
        if (fs::create_directory(dir_)) break;
      }
    }
    record_ = {{"command", command}, {"argv", argv}, {"version", kVersion}, {"started_utc", utc_now("%FT%TZ")}};
  }

  const fs::path& dir() const { return dir_; }
  json& record() { return record_; }

  void finish(int code) {
    record_["finished_utc"] = utc_now("%FT%TZ");
    record_["exit_code"] = code;
    std::ofstream(dir_ / "run.json") << record_.dump(2) << "\n";
  }

 private:
  std::string command_;
  fs::path dir_;
  json record_;
};

struct Common {
  std::string output_root;
  std::string run_dir;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--output-root", c.output_root, "Parent of the run directory (default: $VCAPS_OUTPUT_ROOT or ./runs)");
  sub->add_option("--run-dir", c.run_dir, "Exact run directory to create (must not exist)");
}

Dims3 parse_dims_flag(const std::string& name, const std::string& text) { return Config::parse_dims(name, text); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

// Network + training config from an optional file and --set overrides.
Config merged_config(const std::string& file, const std::vector<std::string>& sets) {
  Config c = file.empty() ? Config{} : Config::load(file);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  return c;
}

Config network_only(const Config& c) {
  Config n;
  for (const auto& [k, v] : c.values())
    if (NetworkConfig::keys().count(k)) n.set(k, v);
  return n;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  Common common;
  std::size_t classes = synth::kNumClasses;
  std::optional<std::size_t> per_class;
  std::optional<std::uint64_t> seed;
  std::string extents, mask, config;
  std::optional<std::size_t> shard_size;
  unsigned threads = default_threads();
};

int cmd_gen_data(const GenArgs& a, const std::vector<std::string>& argv) {
  if (a.classes != synth::kNumClasses)
    throw ConfigError("--classes must be " + std::to_string(synth::kNumClasses) + " (linear, circular, turn, random)");
  synth::DatasetSpec spec;
  if (!a.config.empty()) {
    const Config c = Config::load(a.config);
    c.require_known(synth::synth_keys());
    spec = synth::spec_from_config(c);
  }
  if (!a.extents.empty()) {
    const Dims3 d = parse_dims_flag("--extents", a.extents);
    spec.extents = {d[0], d[1], d[2]};
    const synth::GenRanges defaults = synth::GenRanges::for_extents(d[1]);
    spec.ranges.size = defaults.size;
  }
  if (a.per_class) spec.counts.assign(synth::kNumClasses, *a.per_class);
  if (a.seed) spec.seed = *a.seed;
  if (a.shard_size) spec.shard_size = *a.shard_size;
  if (!a.mask.empty()) {
    if (a.mask != "exact" && a.mask != "box") throw ConfigError("--mask must be exact or box");
    spec.mask_mode = a.mask == "box" ? synth::MaskMode::box : synth::MaskMode::exact;
  }
  spec.threads = a.threads;
  spec.validate();
  Run run("gen-data", a.common.output_root, a.common.run_dir, argv);
  const auto entries = synth::generate_dataset(spec, run.dir());
  const std::string hash = hex64(synth::manifest_hash(run.dir()));
  run.record()["seed"] = spec.seed;
  run.record()["dataset"] = synth::spec_to_json(spec);
  run.record()["samples"] = entries.size();
  run.record()["manifest_hash"] = hash;
  run.finish(kOk);
  std::cout << "wrote " << entries.size() << " videos to " << run.dir().string() << "\n"
            << "manifest " << (run.dir() / "manifest.jsonl").string() << " hash " << hash << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string config, data, holdout, resume;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  Config c = merged_config(a.config, a.sets);
  std::set<std::string> known = NetworkConfig::keys();
  known.insert(TrainConfig::keys().begin(), TrainConfig::keys().end());
  c.require_known(known);
  if (a.seed) c.set("train.seed", std::to_string(*a.seed));
  if (a.threads) c.set("train.threads", std::to_string(*a.threads));
  const NetworkConfig net = NetworkConfig::from_config(network_only(c));
  const TrainConfig tc = TrainConfig::from_config(c);
  plan_network(net);

  const synth::Dataset train = synth::load_dataset(a.data);
  if (train.samples.empty()) throw ConfigError("training set " + a.data + " is empty");
  if (train.extents.frames != net.input[0] || train.extents.height != net.input[1] ||
      train.extents.width != net.input[2])
    throw ConfigError("dataset extents do not match net.input " + dims_text(net.input));
  std::optional<synth::Dataset> holdout;
  if (!a.holdout.empty()) holdout = synth::load_dataset(a.holdout);
  const std::string dataset_hash = hex64(synth::manifest_hash(a.data));

  Trainer<float> trainer(net, tc);
  fs::path dir;
  std::optional<Run> run;
  if (!a.resume.empty()) {
    // Resuming continues in the checkpoint's own run directory.
    trainer.resume(a.resume);
    dir = fs::path(a.resume).parent_path();
    if (dir.empty()) dir = ".";
  } else {
    trainer.init(tc.seed);
    run.emplace("train", a.common.output_root, a.common.run_dir, argv);
    dir = run->dir();
  }
  Config full = net.to_config();
  full.merge(c);
  write_text(dir / "config.cfg", full.canonical());
  const TrainPaths paths{dir / "model.vck", dir / "train_log.csv"};
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t start = trainer.params().step;
  const TrainOutcome out = trainer.run(train.samples, holdout ? &holdout->samples : nullptr, paths, dataset_hash,
                                       [&](const TrainLogRow& r) {
                                         if (a.quiet) return;
                                         if (r.step % 25 == 0 || r.holdout_accuracy) {
                                           const double s = std::chrono::duration<double>(
                                                                std::chrono::steady_clock::now() - t0)
                                                                .count();
                                           std::cout << "step " << r.step << " loss " << r.loss << " L_c "
                                                     << r.classification << " L_s " << r.localization << " m "
                                                     << r.margin;
                                           if (r.holdout_accuracy) std::cout << " holdout_acc " << *r.holdout_accuracy;
                                           std::cout << " (" << std::fixed << std::setprecision(0) << s << "s)\n"
                                                     << std::defaultfloat << std::setprecision(6) << std::flush;
                                         }
                                       });
  json summary{{"steps", out.steps},
               {"resumed_from", start},
               {"last_loss", out.last_loss},
               {"config_hash", hex64(config_hash(net))},
               {"dataset", fs::absolute(a.data).string()},
               {"dataset_hash", dataset_hash},
               {"seed", tc.seed},
               {"parameters", trainer.params().parameter_count()},
               {"checkpoint", paths.checkpoint.string()},
               {"log", paths.log.string()}};
  if (out.last_holdout_accuracy) summary["holdout_accuracy"] = *out.last_holdout_accuracy;
  if (run) {
    run->record().update(summary);
    run->finish(kOk);
  } else {
    json rec;
    std::ifstream in(dir / "run.json");
    if (in) rec = json::parse(in, nullptr, false);
    if (rec.is_discarded() || !rec.is_object()) rec = json::object();
    rec["resumes"].push_back({{"argv", argv}, {"at_utc", utc_now("%FT%TZ")}, {"summary", summary}});
    std::ofstream(dir / "run.json") << rec.dump(2) << "\n";
  }
  std::cout << "trained to step " << out.steps << "; checkpoint " << paths.checkpoint.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint, data, config, iou = "mask";
  std::size_t limit = 0;
  unsigned threads = default_threads();
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  if (a.iou != "mask" && a.iou != "box") throw ConfigError("--iou must be mask or box");
  const Checkpoint<float> ck = load_checkpoint<float>(a.checkpoint);
  const NetworkConfig net = checkpoint_network(ck.header);
  if (!a.config.empty()) {
    const Config c = Config::load(a.config);
    const NetworkConfig want = NetworkConfig::from_config(network_only(c));
    if (config_hash(want) != ck.header.config_hash)
      throw ConfigError("refusing to evaluate: " + a.config + " describes network " + hex64(config_hash(want)) +
                        " but " + a.checkpoint + " was trained as " + hex64(ck.header.config_hash) +
                        "; evaluate with the config the checkpoint was trained with");
  }
  const NetworkPlan plan = plan_network(net);
  const synth::Dataset data = synth::load_dataset(a.data);
  const auto mode = a.iou == "box" ? metrics::Overlap::box : metrics::Overlap::mask;
  const metrics::EvalReport rep = evaluate_model(net, plan, ck.params, data.samples, a.threads, a.limit, mode);
  Run run("eval", a.common.output_root, a.common.run_dir, argv);
  write_text(run.dir() / "eval.json", rep.to_json().dump(2) + "\n");
  {
    std::ofstream csv(run.dir() / "eval.csv");
    rep.write_csv(csv);
  }
  run.record()["checkpoint"] = fs::absolute(a.checkpoint).string();
  run.record()["checkpoint_step"] = ck.header.step;
  run.record()["config_hash"] = hex64(ck.header.config_hash);
  run.record()["dataset"] = fs::absolute(a.data).string();
  run.record()["dataset_hash"] = hex64(synth::manifest_hash(a.data));
  run.record()["seed"] = ck.header.seed;
  run.record()["iou"] = a.iou;
  run.finish(kOk);
  std::cout << std::setprecision(4) << "videos " << rep.videos << "  accuracy " << rep.accuracy << "  mean 3D IoU "
            << rep.mean_iou_3d << "\n"
            << "f-mAP@" << rep.frame_alpha << " " << rep.frame.mean;
  for (const auto& [alpha, r] : rep.video) std::cout << "  v-mAP@" << alpha << " " << r.mean;
  std::cout << "\nreport " << (run.dir() / "eval.json").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
  Common common;
  std::string checkpoint, cls = "linear", sweep = "speed";
  std::vector<double> values;
  std::size_t baseline = 500, per_value = 500, min_correct = 50;
  std::uint64_t seed = 11;
  unsigned threads = default_threads();
};

int cmd_probe(const ProbeArgs& a, const std::vector<std::string>& argv) {
  const Checkpoint<float> ck = load_checkpoint<float>(a.checkpoint);
  const NetworkConfig net = checkpoint_network(ck.header);
  const NetworkPlan plan = plan_network(net);
  probe::ProbeSpec spec;
  spec.motion = synth::motion_from_name(a.cls);
  spec.property = a.sweep;
  spec.values = a.values;
  spec.n_baseline = a.baseline;
  spec.n_per_value = a.per_value;
  spec.min_correct = a.min_correct;
  spec.seed = a.seed;
  spec.threads = a.threads;
  spec.ranges = synth::GenRanges::for_extents(net.input[1]);
  probe::pinned(spec.ranges, spec.property, 0.0);
  Run run("probe", a.common.output_root, a.common.run_dir, argv);
  run.record()["checkpoint"] = fs::absolute(a.checkpoint).string();
  run.record()["seed"] = a.seed;
  try {
    const probe::ProbeReport rep = probe::run(net, plan, ck.params, spec);
    write_text(run.dir() / "probe.json", rep.to_json().dump(2) + "\n");
    std::ofstream csv(run.dir() / "probe.csv");
    rep.write_csv(csv);
    run.record()["best_abs_pearson"] = rep.best_abs_pearson();
    run.finish(kOk);
    std::cout << "class " << a.cls << ", sweep " << a.sweep << ": " << rep.baseline_correct << "/"
              << rep.baseline_total << " baseline videos correct; best |pearson r| " << rep.best_abs_pearson()
              << "\ncsv " << (run.dir() / "probe.csv").string() << "\n";
  } catch (const probe::ProbeError& e) {
    run.record()["error"] = e.what();
    run.finish(kRuntime);
    throw;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  Common common;
  std::string rf = "3x3x3", grid = "6x12x12", stride = "1x1x1";
  std::size_t types = 8;
  std::optional<std::size_t> types_out;
  int reps = 5;
  std::uint64_t seed = 1;
};

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv) {
  bench::BenchSpec s;
  s.rf = parse_dims_flag("--rf", a.rf);
  s.stride = parse_dims_flag("--stride", a.stride);
  s.types_in = a.types;
  s.types_out = a.types_out.value_or(a.types);
  s.reps = a.reps;
  s.seed = a.seed;
  if (a.grid == "tiny") s.grid = plan_network(NetworkConfig::tiny()).caps1;
  else s.grid = parse_dims_flag("--grid", a.grid);
  if (s.types_in == 0 || s.types_out == 0) throw ConfigError("--types must be positive");
  Run run("bench", a.common.output_root, a.common.run_dir, argv);
  const bench::BenchReport rep = bench::run(s);
  write_text(run.dir() / "bench.json", rep.to_json(s).dump(2) + "\n");
  run.record()["seed"] = a.seed;
  run.finish(kOk);
  std::cout << "votes per output position: naive " << rep.naive_votes_per_position << ", pooled "
            << rep.pooled_votes_per_position << " (" << rep.reduction() << "x fewer)\n"
            << std::setprecision(4) << "median seconds over " << s.reps << " reps on grid " << dims_text(s.grid)
            << ": naive " << rep.naive.total() << " (gather " << rep.naive.gather << ", votes " << rep.naive.votes
            << ", routing " << rep.naive.routing << "), pooled " << rep.pooled.total() << " (pool "
            << rep.pooled.gather << ", votes " << rep.pooled.votes << ", routing " << rep.pooled.routing << ")\n"
            << "identical-capsule agreement: max pose deviation " << rep.max_pose_deviation << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SelfcheckArgs {
  Common common;
  bool fast = false;
};

int cmd_selfcheck(const SelfcheckArgs& a, const std::vector<std::string>& argv) {
  Run run("selfcheck", a.common.output_root, a.common.run_dir, argv);
  json results = json::array();
  std::vector<std::string> failed;
  for (const auto& check : checks::invariant_suite(a.fast)) {
    const checks::CheckResult r = checks::run_check(check);
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << std::fixed
              << std::setprecision(2) << r.seconds << "s]\n"
              << std::defaultfloat << std::flush;
    results.push_back({{"criterion", r.criterion}, {"name", r.name}, {"passed", r.passed}, {"detail", r.detail},
                       {"seconds", r.seconds}});
    if (!r.passed) failed.push_back(r.name);
  }
  write_text(run.dir() / "selfcheck.json", results.dump(2) + "\n");
  run.record()["fast"] = a.fast;
  run.record()["failed"] = failed;
  run.finish(failed.empty() ? kOk : kCheckFailed);
  if (!failed.empty()) {
    std::string names;
    for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
    throw CheckFailure("failing checks: " + names);
  }
  std::cout << "all " << results.size() << " checks passed\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Video capsule network toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic moving-shape video dataset");
  add_common(g, gen.common);
  g->add_option("--classes", gen.classes, "Number of motion classes (must be 4)");
  g->add_option("--per-class", gen.per_class, "Videos per class");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--extents", gen.extents, "Video extents TxHxW (default 8x28x28)");
  g->add_option("--mask", gen.mask, "Ground-truth mask: exact or box");
  g->add_option("--shard-size", gen.shard_size, "Videos per shard file");
  g->add_option("--threads", gen.threads, "Worker threads");
  g->add_option("--config", gen.config, "Config file with synth.* keys");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a network on a generated dataset");
  add_common(t, tr.common);
  t->add_option("--config", tr.config, "Config file (network and train.* keys)");
  t->add_option("--set", tr.sets, "Override a config key: key=value (repeatable)");
  t->add_option("--data", tr.data, "Training dataset directory")->required();
  t->add_option("--holdout", tr.holdout, "Holdout dataset directory for periodic accuracy");
  t->add_option("--resume", tr.resume, "Resume from this checkpoint, continuing in its directory");
  t->add_option("--seed", tr.seed, "Initialization and shuffling seed");
  t->add_option("--threads", tr.threads, "Worker threads (1 is bit-reproducible)");
  t->add_flag("--quiet", tr.quiet, "Suppress progress lines");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint: accuracy, f-mAP and v-mAP");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--config", ev.config, "Config the checkpoint must match");
  e->add_option("--iou", ev.iou, "Frame overlap: mask or box");
  e->add_option("--limit", ev.limit, "Evaluate only the first N videos");
  e->add_option("--threads", ev.threads, "Worker threads");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Sweep one generator property and record class-capsule poses");
  add_common(p, pr.common);
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  p->add_option("--class", pr.cls, "Motion class: linear, circular, turn or random");
  p->add_option("--sweep", pr.sweep, "Property: speed, direction, size, noise, rotation, zoom, color, control");
  p->add_option("--values", pr.values, "Sweep values (default: property-specific grid)")->delimiter(',');
  p->add_option("--baseline", pr.baseline, "Baseline videos");
  p->add_option("--per-value", pr.per_value, "Videos per sweep value");
  p->add_option("--min-correct", pr.min_correct, "Abort below this many correct baseline videos");
  p->add_option("--seed", pr.seed, "Probe seed");
  p->add_option("--threads", pr.threads, "Worker threads");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Compare pooled and all-votes capsule routing");
  add_common(b, be.common);
  b->add_option("--rf", be.rf, "Receptive field TxHxW");
  b->add_option("--types", be.types, "Input capsule types");
  b->add_option("--types-out", be.types_out, "Output capsule types (default: --types)");
  b->add_option("--grid", be.grid, "Timing grid: tiny or TxHxW");
  b->add_option("--stride", be.stride, "Stride TxHxW");
  b->add_option("--reps", be.reps, "Timing repetitions");
  b->add_option("--seed", be.seed, "Input seed");

  SelfcheckArgs sc;
  auto* s = app.add_subcommand("selfcheck", "Run gradient, routing, loss and metric invariant checks");
  add_common(s, sc.common);
  s->add_flag("--fast", sc.fast, "Scaled-down end-to-end gradient check and fewer repetitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*g) return cmd_gen_data(gen, args);
    if (*t) return cmd_train(tr, args);
    if (*e) return cmd_eval(ev, args);
    if (*p) return cmd_probe(pr, args);
    if (*b) return cmd_bench(be, args);
    if (*s) return cmd_selfcheck(sc, args);
  } catch (const CheckFailure& err) {
    std::cerr << "vcaps: " << err.what() << "\n";
    return kCheckFailed;
  } catch (const ConfigError& err) {
    std::cerr << "vcaps: invalid configuration: " << err.what() << "\n";
    return kValidation;
  } catch (const UsageError& err) {
    std::cerr << "vcaps: invalid input: " << err.what() << "\n";
    return kValidation;
  } catch (const NumericError& err) {
    std::cerr << "vcaps: numeric failure: " << err.what() << "\n";
    return kRuntime;
  } catch (const std::exception& err) {
    std::cerr << "vcaps: error: " << err.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}
