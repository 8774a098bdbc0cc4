// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lgl2o/config.hpp"
#include "lgl2o/data.hpp"
#include "lgl2o/error.hpp"
#include "lgl2o/fallback.hpp"
#include "lgl2o/guard.hpp"
#include "lgl2o/l2o.hpp"
#include "lgl2o/meta_train.hpp"
#include "lgl2o/optimizee.hpp"

namespace lgl2o {

// ---------------------------------------------------------------------------
// Configuration objects.

struct DatasetSpec {
  std::string name = "moons";
  std::size_t n = 2000;
  double noise = 0.1;
  double revolutions = 1.5;  // spirals only
  std::uint64_t seed = 1;
  std::size_t batch_size = kDefaultBatchSize;
  std::string path;  // file-backed datasets, relative to the data root
  std::string split = "train";
};

enum class OptimizerKind { l2o, sgdnm, sgd, adam, gl2o, lgl2o };

inline OptimizerKind parse_optimizer_kind(const std::string& s, std::size_t line) {
  if (s == "l2o") return OptimizerKind::l2o;
  if (s == "sgdnm") return OptimizerKind::sgdnm;
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "gl2o") return OptimizerKind::gl2o;
  if (s == "lgl2o") return OptimizerKind::lgl2o;
  throw ConfigError("unknown optimizer kind '" + s + "' (expected l2o, sgdnm, sgd, adam, gl2o or lgl2o)", line);
}

inline FallbackKind parse_fallback_kind(const std::string& s, std::size_t line) {
  if (s == "sgdnm") return FallbackKind::sgd_nm;
  if (s == "sgd") return FallbackKind::sgd_momentum;
  if (s == "adam") return FallbackKind::adam;
  throw ConfigError("unknown fallback '" + s + "' (expected sgdnm, sgd or adam)", line);
}

struct OptimizerSpec {
  std::string id;
  OptimizerKind kind = OptimizerKind::sgdnm;
  FallbackKind fallback = FallbackKind::sgd_nm;
  double lr = 3.0;
  double decay = 50000.0;  // 0 disables the schedule
  FallbackHyper hyper;
  LGL2OConfig lgl2o;
  GL2OConfig gl2o;

  bool guarded() const noexcept { return kind == OptimizerKind::lgl2o || kind == OptimizerKind::gl2o; }
  bool uses_l2o() const noexcept { return guarded() || kind == OptimizerKind::l2o; }

  LrSchedule schedule() const { return decay > 0.0 ? LrSchedule::power_decay(lr, decay) : LrSchedule::constant_lr(lr); }
  FallbackOptimizer make_fallback() const { return FallbackOptimizer(fallback, schedule(), hyper); }
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  ArchSpec optimizee = MlpSpec{};
  std::vector<OptimizerSpec> optimizers;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::uint64_t steps = 50000;
  std::filesystem::path l2o_weights;
  std::filesystem::path output = "out";
  std::uint64_t smoothing_start = 300;
  std::uint64_t smoothing_window = 1000;
  std::size_t jobs = 1;
  bool record_wall_time = false;
};

struct MetaConfigFile {
  DatasetSpec dataset;
  ArchSpec optimizee = MlpSpec{};
  MetaTrainConfig meta;
  std::filesystem::path output = "weights/l2o.bin";
  std::filesystem::path log = "meta_train_log.csv";
};

namespace detail {

inline std::filesystem::path resolve(const ConfigFile& file, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute() || file.source().empty()) return path;
  return file.source().parent_path() / path;
}

inline std::vector<std::size_t> to_sizes(const std::vector<std::uint64_t>& v) { return {v.begin(), v.end()}; }

inline Activation parse_activation(const ConfigSection& s, Activation fallback) {
  if (!s.has("activation")) return fallback;
  const auto& e = s.entry("activation");
  if (e.value == "sigmoid") return Activation::sigmoid;
  if (e.value == "relu") return Activation::relu;
  if (e.value == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + e.value + "'", e.line);
}

inline DatasetSpec parse_dataset(const ConfigSection& s) {
  s.expect_only({"name", "n", "noise", "revolutions", "seed", "batch_size", "path", "split"});
  DatasetSpec d;
  d.name = s.get("name", d.name);
  if (d.name == "spirals") d.noise = 0.05;
  d.n = s.get_uint("n", d.n);
  d.noise = s.get_double("noise", d.noise);
  d.revolutions = s.get_double("revolutions", d.revolutions);
  d.seed = s.get_uint("seed", d.seed);
  d.batch_size = s.get_uint("batch_size", d.batch_size);
  d.path = s.get("path", "");
  d.split = s.get("split", d.split);
  const std::set<std::string> known{"moons", "circles", "spirals", "mnist", "fashion-mnist", "cifar10"};
  if (!known.contains(d.name)) {
    throw ConfigError("unknown dataset '" + d.name + "'", s.has("name") ? s.entry("name").line : s.line());
  }
  if (d.batch_size == 0) throw ConfigError("batch_size must be positive", s.entry("batch_size").line);
  return d;
}

inline ArchSpec parse_optimizee(const ConfigSection& s) {
  s.expect_only({"kind", "inputs", "hidden", "classes", "activation", "in_channels", "height", "width", "channels",
                 "kernels", "strides", "padding"});
  const std::string kind = s.get("kind", "mlp");
  if (kind == "mlp") {
    MlpSpec m;
    m.inputs = s.get_uint("inputs", m.inputs);
    m.hidden = to_sizes(s.get_uint_list("hidden", {m.hidden.begin(), m.hidden.end()}));
    m.classes = s.get_uint("classes", m.classes);
    m.activation = parse_activation(s, m.activation);
    return m;
  }
  if (kind == "cnn") {
    CnnSpec c;
    c.in_channels = s.get_uint("in_channels", c.in_channels);
    c.height = s.get_uint("height", c.height);
    c.width = s.get_uint("width", c.width);
    c.channels = to_sizes(s.get_uint_list("channels", {c.channels.begin(), c.channels.end()}));
    c.kernels = to_sizes(s.get_uint_list("kernels", {c.kernels.begin(), c.kernels.end()}));
    c.strides = to_sizes(s.get_uint_list("strides", {c.strides.begin(), c.strides.end()}));
    c.padding = s.get_uint("padding", c.padding);
    c.classes = s.get_uint("classes", c.classes);
    c.activation = parse_activation(s, c.activation);
    return c;
  }
  throw ConfigError("unknown optimizee kind '" + kind + "' (expected mlp or cnn)", s.entry("kind").line);
}

inline OptimizerSpec parse_optimizer(const ConfigSection& s) {
  s.expect_only({"kind", "fallback", "lr", "decay", "momentum", "beta1", "beta2", "epsilon", "n_t", "n_c", "adaptive",
                 "growth", "cap", "parallel", "alpha", "theta", "m", "sequence"});
  OptimizerSpec o;
  o.id = s.name().substr(std::string_view("optimizer:").size());
  if (o.id.empty()) throw ConfigError("optimizer section needs a name, e.g. [optimizer:lgl2o]", s.line());
  const std::size_t kind_line = s.has("kind") ? s.entry("kind").line : s.line();
  o.kind = parse_optimizer_kind(s.get("kind", o.id), kind_line);
  switch (o.kind) {
    case OptimizerKind::sgdnm: o.fallback = FallbackKind::sgd_nm; break;
    case OptimizerKind::sgd: o.fallback = FallbackKind::sgd_momentum; break;
    case OptimizerKind::adam: o.fallback = FallbackKind::adam; break;
    default: {
      const std::size_t line = s.has("fallback") ? s.entry("fallback").line : s.line();
      o.fallback = parse_fallback_kind(s.get("fallback", "sgdnm"), line);
    }
  }
  if (o.fallback == FallbackKind::adam) {
    o.lr = 0.01;
    o.decay = 0.0;
  }
  o.lr = s.get_double("lr", o.lr);
  o.decay = s.get_double("decay", o.decay);
  if (!(o.lr > 0.0)) throw ConfigError("lr must be positive", s.has("lr") ? s.entry("lr").line : s.line());
  if (o.decay < 0.0) throw ConfigError("decay must be non-negative", s.entry("decay").line);
  o.hyper.momentum = s.get_double("momentum", o.hyper.momentum);
  o.hyper.beta1 = s.get_double("beta1", o.hyper.beta1);
  o.hyper.beta2 = s.get_double("beta2", o.hyper.beta2);
  o.hyper.epsilon = s.get_double("epsilon", o.hyper.epsilon);

  o.lgl2o.n_t = s.get_uint("n_t", o.lgl2o.n_t);
  o.lgl2o.n_c = s.get_uint("n_c", o.lgl2o.n_c);
  o.lgl2o.adaptive = s.get_bool("adaptive", o.lgl2o.adaptive);
  o.lgl2o.growth = s.get_double("growth", o.lgl2o.growth);
  o.lgl2o.cap = s.get_uint("cap", o.lgl2o.cap);
  o.lgl2o.parallel_rollouts = s.get_bool("parallel", o.lgl2o.parallel_rollouts);
  o.gl2o.alpha = s.get_double("alpha", o.gl2o.alpha);
  o.gl2o.theta = s.get_double("theta", o.gl2o.theta);
  o.gl2o.m = s.get_uint("m", o.gl2o.m);
  if (s.has("sequence")) {
    const auto& e = s.entry("sequence");
    if (e.value == "ema") o.gl2o.sequence = SafeguardSequence::exponential_moving_average;
    else if (e.value == "recent_max") o.gl2o.sequence = SafeguardSequence::recent_max;
    else throw ConfigError("unknown sequence '" + e.value + "' (expected ema or recent_max)", e.line);
  }
  try {
    if (o.kind == OptimizerKind::lgl2o) o.lgl2o.validate();
    if (o.kind == OptimizerKind::gl2o) o.gl2o.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.what(), s.line());
  }
  return o;
}

inline L2OConfig parse_l2o(const ConfigSection& s) {
  s.expect_only({"hidden", "layers", "output_scale", "preprocess_p"});
  L2OConfig c;
  c.hidden = s.get_uint("hidden", c.hidden);
  c.layers = s.get_uint("layers", c.layers);
  c.output_scale = s.get_double("output_scale", c.output_scale);
  c.preprocess_p = s.get_double("preprocess_p", c.preprocess_p);
  if (c.hidden == 0 || c.layers == 0) throw ConfigError("l2o hidden and layers must be positive", s.line());
  return c;
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const ConfigFile& file) {
  file.expect_sections({"experiment", "dataset", "optimizee"}, {"optimizer:"});
  ExperimentConfig cfg;
  const ConfigSection& e = file.section("experiment");
  e.expect_only({"name", "seeds", "steps", "l2o_weights", "output", "smoothing_start", "smoothing_window", "jobs",
                 "wall_time"});
  cfg.name = e.get("name", cfg.name);
  cfg.seeds = e.get_uint_list("seeds", cfg.seeds);
  {
    std::vector<std::uint64_t> sorted = cfg.seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("seeds must be distinct", e.entry("seeds").line);
    }
  }
  cfg.steps = e.get_uint("steps", cfg.steps);
  if (cfg.steps == 0) throw ConfigError("steps must be positive", e.entry("steps").line);
  if (e.has("l2o_weights")) cfg.l2o_weights = detail::resolve(file, e.require("l2o_weights"));
  cfg.output = detail::resolve(file, e.get("output", cfg.output.string()));
  cfg.smoothing_start = e.get_uint("smoothing_start", cfg.smoothing_start);
  cfg.smoothing_window = e.get_uint("smoothing_window", cfg.smoothing_window);
  if (cfg.smoothing_window == 0) throw ConfigError("smoothing_window must be positive", e.entry("smoothing_window").line);
  cfg.jobs = e.get_uint("jobs", cfg.jobs);
  cfg.record_wall_time = e.get_bool("wall_time", cfg.record_wall_time);

  cfg.dataset = detail::parse_dataset(file.section_or_empty("dataset"));
  cfg.optimizee = detail::parse_optimizee(file.section_or_empty("optimizee"));
  for (const ConfigSection* s : file.sections_with_prefix("optimizer:")) cfg.optimizers.push_back(detail::parse_optimizer(*s));
  if (cfg.optimizers.empty()) throw ConfigError("no [optimizer:...] sections", 0);

  const bool needs_l2o = std::any_of(cfg.optimizers.begin(), cfg.optimizers.end(), [](const auto& o) { return o.uses_l2o(); });
  if (needs_l2o) {
    if (cfg.l2o_weights.empty()) throw ConfigError("l2o-based optimizers need experiment.l2o_weights", e.line());
    if (!std::filesystem::exists(cfg.l2o_weights)) {
      throw ConfigError("l2o weight file not found: " + cfg.l2o_weights.string(), e.entry("l2o_weights").line);
    }
  }
  return cfg;
}

inline MetaConfigFile parse_meta_config(const ConfigFile& file) {
  file.expect_sections({"meta", "l2o", "dataset", "optimizee"});
  MetaConfigFile cfg;
  const ConfigSection& m = file.section("meta");
  m.expect_only({"meta_steps", "rollout", "truncation", "meta_lr", "seed", "output", "log"});
  cfg.meta.meta_steps = m.get_uint("meta_steps", cfg.meta.meta_steps);
  cfg.meta.rollout = m.get_uint("rollout", cfg.meta.rollout);
  cfg.meta.truncation = m.get_uint("truncation", cfg.meta.truncation);
  cfg.meta.meta_lr = m.get_double("meta_lr", cfg.meta.meta_lr);
  cfg.meta.seed = m.get_uint("seed", cfg.meta.seed);
  cfg.output = detail::resolve(file, m.get("output", cfg.output.string()));
  cfg.log = detail::resolve(file, m.get("log", cfg.log.string()));
  if (cfg.meta.truncation == 0 || cfg.meta.rollout % cfg.meta.truncation != 0) {
    throw ConfigError("rollout must be a positive multiple of truncation", m.line());
  }
  if (!(cfg.meta.meta_lr > 0.0)) throw ConfigError("meta_lr must be positive", m.line());
  cfg.meta.l2o = detail::parse_l2o(file.section_or_empty("l2o"));
  cfg.dataset = detail::parse_dataset(file.section_or_empty("dataset"));
  cfg.meta.batch_size = cfg.dataset.batch_size;
  cfg.optimizee = detail::parse_optimizee(file.section_or_empty("optimizee"));
  return cfg;
}

inline std::shared_ptr<const Dataset> load_dataset(const DatasetSpec& d) {
  if (d.name == "moons") return std::make_shared<const Dataset>(gen_moons(d.n, d.noise, d.seed));
  if (d.name == "circles") return std::make_shared<const Dataset>(gen_circles(d.n, d.noise, d.seed));
  if (d.name == "spirals") return std::make_shared<const Dataset>(gen_spirals(d.n, d.noise, d.seed, d.revolutions));
  const std::filesystem::path root = dataset_root();
  if (d.name == "mnist" || d.name == "fashion-mnist") {
    return std::make_shared<const Dataset>(load_mnist(root / (d.path.empty() ? d.name : d.path), d.split));
  }
  if (d.name == "cifar10") {
    const std::filesystem::path dir = root / (d.path.empty() ? "cifar-10-batches-bin" : d.path);
    std::vector<std::filesystem::path> files;
    if (d.split == "test") {
      files.push_back(dir / "test_batch.bin");
    } else {
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    }
    return std::make_shared<const Dataset>(load_cifar10(files));
  }
  throw ConfigError("unknown dataset '" + d.name + "'", 0);
}

// ---------------------------------------------------------------------------
// Running.

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline double parse_csv_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw ParseError("csv: bad number '" + s + "'");
  return v;
}

struct RunResult {
  std::string optimizer;
  OptimizerKind kind = OptimizerKind::sgdnm;
  std::uint64_t seed = 0;
  GuardRun run;
  std::vector<double> wall_ms;
  std::string status = "ok";  // ok | diverged (raw l2o stopped early) | failed
  std::string reason;

  double final_loss() const { return run.steps.empty() ? kInf : run.steps.back().train_loss; }
};

/// Trailing moving average that starts at `start`: entry t (t >= start) is
/// the mean of losses[max(start, t - window + 1) .. t]. Earlier entries are
/// absent (the returned vector is indexed from `start`).
inline std::vector<double> smooth(std::span<const double> losses, std::uint64_t start, std::uint64_t window) {
  std::vector<double> out;
  double sum = 0.0;
  for (std::uint64_t t = start; t < losses.size(); ++t) {
    sum += losses[t];
    if (t >= start + window) sum -= losses[t - window];
    out.push_back(sum / static_cast<double>(std::min<std::uint64_t>(window, t - start + 1)));
  }
  return out;
}

/// Last smoothed value, or +inf when the run failed or is shorter than
/// expected.
inline double final_smoothed(const RunResult& r, std::uint64_t steps, std::uint64_t start, std::uint64_t window) {
  if (r.status != "ok" || r.run.steps.size() != steps) return kInf;
  std::vector<double> losses;
  for (const auto& s : r.run.steps) losses.push_back(s.train_loss);
  const auto sm = smooth(losses, std::min(start, steps - 1), window);
  return sm.empty() ? kInf : sm.back();
}

/// One (optimizer, seed) run. Every optimizer in a cell starts from the same
/// initial parameters and consumes the same training batch stream for a seed.
inline RunResult run_single(const ExperimentConfig& cfg, const OptimizerSpec& spec, std::uint64_t seed,
                            const std::shared_ptr<const Dataset>& data, const std::optional<L2OWeights>& weights) {
  RunResult r;
  r.optimizer = spec.id;
  r.kind = spec.kind;
  r.seed = seed;
  Optimizee net(cfg.optimizee);
  const ParamVector x0 = net.init_params(Rng::derive(seed, 1));
  BatchSampler sampler(data, Rng::derive(seed, 2), cfg.dataset.batch_size);
  DatasetProblem problem(net, sampler);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::unique_ptr<L2OOptimizer> l2o;
    if (spec.uses_l2o()) l2o = std::make_unique<L2OOptimizer>(*weights);
    FallbackOptimizer fallback = spec.make_fallback();
    switch (spec.kind) {
      case OptimizerKind::l2o: r.run = l2o_run(problem, *l2o, x0, cfg.steps); break;
      case OptimizerKind::sgdnm:
      case OptimizerKind::sgd:
      case OptimizerKind::adam: r.run = fallback_run(problem, fallback, x0, cfg.steps); break;
      case OptimizerKind::gl2o: {
        GL2OConfig g = spec.gl2o;
        g.total_steps = cfg.steps;
        r.run = gl2o_run(problem, *l2o, fallback, x0, g);
        break;
      }
      case OptimizerKind::lgl2o: {
        LGL2OConfig c = spec.lgl2o;
        c.total_steps = cfg.steps;
        r.run = lgl2o_stochastic(problem, *l2o, fallback, x0, c);
        break;
      }
    }
    if (r.run.failure) {
      r.status = spec.kind == OptimizerKind::l2o ? "diverged" : "failed";
      r.reason = *r.run.failure;
    }
  } catch (const std::exception& e) {
    r.status = "failed";
    r.reason = e.what();
  }
  const double total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  r.wall_ms.assign(r.run.steps.size(), 0.0);
  if (cfg.record_wall_time && !r.run.steps.empty()) {
    // Per-step times are not measured individually; spread the run's total.
    for (std::size_t i = 0; i < r.wall_ms.size(); ++i) {
      r.wall_ms[i] = total_ms * static_cast<double>(i + 1) / static_cast<double>(r.wall_ms.size());
    }
  }
  return r;
}

struct SummaryRow {
  std::string optimizer;
  std::uint64_t step = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t runs = 0;
};

/// Per optimizer and step: mean/min/max over the runs that reached the step.
inline std::vector<SummaryRow> summarize(const std::vector<std::string>& optimizers,
                                         const std::map<std::string, std::vector<std::vector<double>>>& curves,
                                         std::uint64_t first_step = 0) {
  std::vector<SummaryRow> rows;
  for (const auto& id : optimizers) {
    auto it = curves.find(id);
    if (it == curves.end()) continue;
    std::size_t longest = 0;
    for (const auto& c : it->second) longest = std::max(longest, c.size());
    for (std::size_t t = 0; t < longest; ++t) {
      SummaryRow row{id, first_step + t, 0.0, kInf, -kInf, 0};
      for (const auto& c : it->second) {
        if (t >= c.size()) continue;
        row.mean += c[t];
        row.min = std::min(row.min, c[t]);
        row.max = std::max(row.max, c[t]);
        ++row.runs;
      }
      row.mean /= static_cast<double>(row.runs);
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string run_csv_name(const std::string& optimizer, std::uint64_t seed) {
  return "run_" + optimizer + "_s" + std::to_string(seed) + ".csv";
}

inline void write_run_csv(const RunResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,train_loss,optimizer,seed,use_l2o,lr,wall_ms\n";
  const bool guarded = r.kind == OptimizerKind::lgl2o || r.kind == OptimizerKind::gl2o;
  for (std::size_t i = 0; i < r.run.steps.size(); ++i) {
    const auto& s = r.run.steps[i];
    out << s.step << ',' << format_double(s.train_loss) << ',' << r.optimizer << ',' << r.seed << ','
        << (guarded ? format_double(s.use_l2o) : std::string()) << ',' << format_double(s.lr) << ','
        << format_double(r.wall_ms[i]) << '\n';
  }
}

inline void write_decisions_csv(const RunResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,branch,l2o_val_loss,fb_val_loss,n_t_effective\n";
  for (const auto& d : r.run.decisions) {
    out << d.step << ',' << to_string(d.chosen) << ',' << format_double(d.l2o_loss) << ','
        << format_double(d.fallback_loss) << ',' << d.n_t << '\n';
  }
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "optimizer,step,mean,min,max,runs\n";
  for (const auto& r : rows) {
    out << r.optimizer << ',' << r.step << ',' << format_double(r.mean) << ',' << format_double(r.min) << ','
        << format_double(r.max) << ',' << r.runs << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Training-loss column of a run CSV.
inline std::vector<double> read_run_losses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,train_loss,optimizer,seed,use_l2o,lr,wall_ms") throw ParseError(path.string() + ": unexpected header");
  std::vector<double> out;
  while (std::getline(in, line)) {
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 7) throw ParseError(path.string() + ": malformed row '" + line + "'");
    out.push_back(parse_csv_double(cells[1]));
  }
  return out;
}

struct ExperimentResult {
  std::vector<RunResult> runs;
  std::vector<SummaryRow> summary;
  std::vector<SummaryRow> smoothed;
  bool audit_ok = false;
  std::string audit_message;

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const auto& r) { return r.status == "failed"; }));
  }

  const RunResult& find(const std::string& optimizer, std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.optimizer == optimizer && r.seed == seed) return r;
    throw Error("no run for " + optimizer + " seed " + std::to_string(seed));
  }
};

/// Re-reads the per-run CSVs in `dir` and checks that `summary` reproduces
/// their per-step mean/min/max exactly.
inline std::pair<bool, std::string> audit_summary(const std::filesystem::path& dir, const std::vector<std::string>& optimizers,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  const std::vector<SummaryRow>& summary) {
  std::map<std::string, std::vector<std::vector<double>>> curves;
  for (const auto& id : optimizers)
    for (auto seed : seeds) curves[id].push_back(read_run_losses(dir / run_csv_name(id, seed)));
  const auto recomputed = summarize(optimizers, curves);
  if (recomputed.size() != summary.size()) return {false, "summary row count differs from run CSVs"};
  for (std::size_t i = 0; i < summary.size(); ++i) {
    const auto& a = summary[i];
    const auto& b = recomputed[i];
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    if (a.optimizer != b.optimizer || a.step != b.step || a.runs != b.runs || !same(a.mean, b.mean) ||
        !same(a.min, b.min) || !same(a.max, b.max)) {
      return {false, "summary mismatch for " + a.optimizer + " at step " + std::to_string(a.step)};
    }
  }
  return {true, "summary reproduced from " + std::to_string(optimizers.size() * seeds.size()) + " run files"};
}

/// Runs every (optimizer, seed) pair, writes per-run CSVs, decision traces
/// for guarded optimizers, runs.csv, summary.csv and summary_smoothed.csv
/// into cfg.output, then audits the summary against the run files.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const auto data = load_dataset(cfg.dataset);
  std::optional<L2OWeights> weights;
  if (!cfg.l2o_weights.empty()) weights = load_weights(cfg.l2o_weights);
  std::filesystem::create_directories(cfg.output);

  struct Job {
    const OptimizerSpec* spec;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& o : cfg.optimizers)
    for (auto seed : cfg.seeds) jobs.push_back({&o, seed});

  ExperimentResult result;
  result.runs.resize(jobs.size());
  const std::size_t workers = std::max<std::size_t>(1, cfg.jobs);
  for (std::size_t begin = 0; begin < jobs.size(); begin += workers) {
    std::vector<std::future<RunResult>> pending;
    const std::size_t end = std::min(jobs.size(), begin + workers);
    for (std::size_t j = begin; j < end; ++j) {
      pending.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                   [&, j] { return run_single(cfg, *jobs[j].spec, jobs[j].seed, data, weights); }));
    }
    for (std::size_t j = begin; j < end; ++j) result.runs[j] = pending[j - begin].get();
  }

  std::vector<std::string> ids;
  for (const auto& o : cfg.optimizers) ids.push_back(o.id);
  std::map<std::string, std::vector<std::vector<double>>> curves;
  std::map<std::string, std::vector<std::vector<double>>> smoothed;
  for (const auto& r : result.runs) {
    write_run_csv(r, cfg.output / run_csv_name(r.optimizer, r.seed));
    if (r.kind == OptimizerKind::lgl2o || r.kind == OptimizerKind::gl2o) {
      write_decisions_csv(r, cfg.output / ("decisions_" + r.optimizer + "_s" + std::to_string(r.seed) + ".csv"));
    }
    std::vector<double> losses;
    for (const auto& s : r.run.steps) losses.push_back(s.train_loss);
    smoothed[r.optimizer].push_back(smooth(losses, cfg.smoothing_start, cfg.smoothing_window));
    curves[r.optimizer].push_back(std::move(losses));
  }
  result.summary = summarize(ids, curves);
  result.smoothed = summarize(ids, smoothed, cfg.smoothing_start);
  write_summary_csv(result.summary, cfg.output / "summary.csv");
  write_summary_csv(result.smoothed, cfg.output / "summary_smoothed.csv");

  std::ofstream index(cfg.output / "runs.csv");
  index << "optimizer,seed,status,steps,final_loss,final_smoothed_loss,reason\n";
  for (const auto& r : result.runs) {
    std::string reason = r.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    index << r.optimizer << ',' << r.seed << ',' << r.status << ',' << r.run.steps.size() << ','
          << format_double(r.final_loss()) << ','
          << format_double(final_smoothed(r, cfg.steps, cfg.smoothing_start, cfg.smoothing_window)) << ',' << reason << '\n';
  }
  index.close();

  std::tie(result.audit_ok, result.audit_message) = audit_summary(cfg.output, ids, cfg.seeds, result.summary);
  return result;
}

// ---------------------------------------------------------------------------
// Meta-training from a config file.

inline MetaTrainResult run_meta_training(const MetaConfigFile& cfg) {
  const auto data = load_dataset(cfg.dataset);
  MetaTrainer trainer(Optimizee(cfg.optimizee), data, cfg.meta);
  MetaTrainResult result = trainer.train();
  if (cfg.output.has_parent_path()) std::filesystem::create_directories(cfg.output.parent_path());
  save_weights(result.weights, cfg.output);
  if (cfg.log.has_parent_path()) std::filesystem::create_directories(cfg.log.parent_path());
  write_meta_log_csv(result.log, cfg.log);
  return result;
}

}  // namespace lgl2o
