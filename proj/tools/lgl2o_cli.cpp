// SPDX-License-Identifier: Apache-2.0
//
// lgl2o: meta-train a learned optimizer, run guarded optimization
// experiments, check the convergence inequalities, generate toy datasets and
// inspect weight files.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "lgl2o/lgl2o.hpp"

namespace {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRunFailure = 2, kTheoremFailure = 3 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::uint64_t> steps;
};

int cmd_meta_train(const std::string& path, const Overrides& o) {
  lgl2o::MetaConfigFile cfg = lgl2o::parse_meta_config(lgl2o::ConfigFile::load(path));
  if (o.seed) cfg.meta.seed = *o.seed;
  if (o.steps) cfg.meta.meta_steps = *o.steps;
  if (o.out) {
    cfg.output = std::filesystem::path(*o.out) / cfg.output.filename();
    cfg.log = std::filesystem::path(*o.out) / cfg.log.filename();
  }
  const auto result = lgl2o::run_meta_training(cfg);
  std::size_t skipped = 0;
  for (const auto& row : result.log) skipped += row.skipped ? 1 : 0;
  std::cout << "meta-steps: " << result.log.size() << " (skipped " << skipped << ")\n"
            << "final meta-loss: " << (result.log.empty() ? 0.0 : result.log.back().meta_loss) << '\n'
            << "weights: " << cfg.output.string() << '\n'
            << "log: " << cfg.log.string() << '\n';
  return kOk;
}

int cmd_run(const std::string& path, const Overrides& o) {
  lgl2o::ExperimentConfig cfg = lgl2o::parse_experiment(lgl2o::ConfigFile::load(path));
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.out) cfg.output = *o.out;
  if (o.steps) cfg.steps = *o.steps;
  const auto result = lgl2o::run_experiment(cfg);
  for (const auto& r : result.runs) {
    std::cout << std::left << std::setw(14) << r.optimizer << " seed " << std::setw(4) << r.seed << ' '
              << std::setw(9) << r.status << " final smoothed loss "
              << lgl2o::final_smoothed(r, cfg.steps, cfg.smoothing_start, cfg.smoothing_window);
    if (!r.reason.empty()) std::cout << "  (" << r.reason << ')';
    std::cout << '\n';
  }
  std::cout << "audit: " << result.audit_message << '\n' << "output: " << cfg.output.string() << '\n';
  if (!result.audit_ok) return kRunFailure;
  return result.failures() == 0 ? kOk : kRunFailure;
}

lgl2o::TheoremSuiteConfig parse_theorem_config(const std::string& path) {
  lgl2o::TheoremSuiteConfig cfg;
  if (path.empty()) return cfg;
  const auto file = lgl2o::ConfigFile::load(path);
  file.expect_sections({"theorems"});
  const auto s = file.section_or_empty("theorems");
  s.expect_only({"objectives", "min_dim", "max_dim", "eig_lo", "eig_hi", "deterministic_steps", "pl_points", "seeds",
                 "checkpoints", "tolerance", "seed"});
  cfg.objectives = s.get_uint("objectives", cfg.objectives);
  cfg.min_dim = s.get_uint("min_dim", cfg.min_dim);
  cfg.max_dim = s.get_uint("max_dim", cfg.max_dim);
  cfg.eig_lo = s.get_double("eig_lo", cfg.eig_lo);
  cfg.eig_hi = s.get_double("eig_hi", cfg.eig_hi);
  cfg.deterministic_steps = s.get_uint("deterministic_steps", cfg.deterministic_steps);
  cfg.pl_points = s.get_uint("pl_points", cfg.pl_points);
  cfg.seeds = s.get_uint("seeds", cfg.seeds);
  const auto cps = s.get_uint_list("checkpoints", {cfg.checkpoints.begin(), cfg.checkpoints.end()});
  cfg.checkpoints.assign(cps.begin(), cps.end());
  cfg.tolerance = s.get_double("tolerance", cfg.tolerance);
  cfg.seed = s.get_uint("seed", cfg.seed);
  if (cfg.objectives == 0 || cfg.min_dim == 0 || cfg.max_dim < cfg.min_dim) {
    throw lgl2o::ConfigError("theorems: need objectives >= 1 and 1 <= min_dim <= max_dim", s.line());
  }
  if (!(cfg.eig_lo > 0.0 && cfg.eig_hi >= cfg.eig_lo)) {
    throw lgl2o::ConfigError("theorems: need 0 < eig_lo <= eig_hi", s.line());
  }
  return cfg;
}

int cmd_check_theorems(const std::string& path, const Overrides& o) {
  lgl2o::TheoremSuiteConfig cfg = parse_theorem_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.deterministic_steps = *o.steps;
  const auto report = lgl2o::run_theorem_suite(cfg);
  report.write_text(std::cout);
  if (o.out) {
    std::filesystem::create_directories(*o.out);
    report.write_csv(std::filesystem::path(*o.out) / "theorem_report.csv");
  }
  return report.pass() ? kOk : kTheoremFailure;
}

struct GenDataArgs {
  std::string name;
  std::size_t n = 2000;
  std::uint64_t seed = 0;
  std::optional<double> noise;
  double revolutions = 1.5;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  lgl2o::Dataset ds;
  if (a.name == "moons") ds = lgl2o::gen_moons(a.n, a.noise.value_or(0.1), a.seed);
  else if (a.name == "circles") ds = lgl2o::gen_circles(a.n, a.noise.value_or(0.1), a.seed);
  else if (a.name == "spirals") ds = lgl2o::gen_spirals(a.n, a.noise.value_or(0.05), a.seed, a.revolutions);
  else throw lgl2o::ConfigError("gen-data: unknown dataset '" + a.name + "' (expected moons, circles or spirals)");
  const std::string out = a.out.empty() ? a.name + ".csv" : a.out;
  lgl2o::write_dataset_csv(ds, out);
  std::cout << "wrote " << ds.size() << " rows to " << out << '\n';
  return kOk;
}

int cmd_inspect(const std::string& path) {
  const auto w = lgl2o::load_weights(path);
  std::cout << "format version " << lgl2o::kWeightVersion << '\n'
            << "hidden " << w.config.hidden << ", layers " << w.config.layers << ", output scale "
            << w.config.output_scale << ", preprocess p " << w.config.preprocess_p << '\n'
            << "parameters " << w.zeta.size() << '\n';
  for (const auto& b : w.zeta.layout()->blocks()) {
    double sq = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) sq += w.zeta[b.offset + i] * w.zeta[b.offset + i];
    std::cout << "  " << std::left << std::setw(16) << b.name << std::setw(10) << lgl2o::ad::to_string(b.shape)
              << " norm " << std::sqrt(sq) << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loss-guarded learned optimization toolkit"};
  app.require_subcommand(1);

  Overrides overrides;
  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", overrides.seed, "Override the seed (run: single seed)");
    cmd->add_option("--out", overrides.out, "Override the output directory");
    cmd->add_option("--steps", overrides.steps, "Override the step budget");
  };

  std::string config;
  auto* meta = app.add_subcommand("meta-train", "Meta-train the learned optimizer");
  meta->add_option("config", config, "Meta-training config")->required();
  add_overrides(meta);

  auto* run = app.add_subcommand("run", "Run an experiment cell");
  run->add_option("config", config, "Experiment config")->required();
  add_overrides(run);

  auto* theorems = app.add_subcommand("check-theorems", "Check the convergence inequalities on quadratics");
  theorems->add_option("config", config, "Optional [theorems] config");
  add_overrides(theorems);

  GenDataArgs gen;
  auto* gen_data = app.add_subcommand("gen-data", "Write a synthetic 2-D dataset as CSV");
  gen_data->add_option("name", gen.name, "moons, circles or spirals")->required();
  gen_data->add_option("--n", gen.n, "Number of points");
  gen_data->add_option("--seed", gen.seed, "Noise seed");
  gen_data->add_option("--noise", gen.noise, "Gaussian noise level");
  gen_data->add_option("--revolutions", gen.revolutions, "Spiral turns");
  gen_data->add_option("--out", gen.out, "Output CSV path");

  std::string weights;
  auto* inspect = app.add_subcommand("inspect", "Describe a weight file");
  inspect->add_option("weights", weights, "Weight file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*meta) return cmd_meta_train(config, overrides);
    if (*run) return cmd_run(config, overrides);
    if (*theorems) return cmd_check_theorems(config, overrides);
    if (*gen_data) return cmd_gen_data(gen);
    if (*inspect) return cmd_inspect(weights);
  } catch (const lgl2o::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const lgl2o::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "run failure: " << e.what() << '\n';
    return kRunFailure;
  }
  return kOk;
}
