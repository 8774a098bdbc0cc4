// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgl2o/data.hpp"
#include "lgl2o/error.hpp"
#include "lgl2o/fallback.hpp"
#include "lgl2o/l2o.hpp"
#include "lgl2o/optimizee.hpp"

namespace lgl2o {

struct MetaTrainConfig {
  L2OConfig l2o;
  std::size_t meta_steps = 500;  // Adam updates of the meta-parameters
  std::size_t rollout = 100;     // inner steps per fresh optimizee
  std::size_t truncation = 20;   // inner steps per meta-step
  double meta_lr = 0.001;
  std::size_t batch_size = kDefaultBatchSize;
  std::uint64_t seed = 0;
};

struct MetaLogRow {
  std::size_t meta_step = 0;
  std::size_t rollout = 0;
  std::size_t window = 0;
  double meta_loss = 0.0;
  double meta_lr = 0.0;
  bool skipped = false;
};

struct MetaTrainResult {
  L2OWeights weights;
  std::vector<MetaLogRow> log;
};

/// Output of one truncation window.
struct WindowResult {
  double meta_loss = 0.0;
  ParamVector zeta_grad;            // empty unless requested
  ParamVector theta_end;
  LstmState state_end;
  std::vector<ParamVector> inputs;  // optimizee gradients fed to the LSTM
};

/// Unrolls `batches.size() - 1` learned-optimizer steps from (theta0, state0).
///
/// meta-loss = sum_{t=1..T} F(theta_t, b_t). The gradient fed to the LSTM at
/// step t is d F(theta_t, b_t) / d theta_t taken as a constant, so the
/// meta-gradient ignores second-order paths through it. When `frozen_inputs`
/// is given those gradients are used verbatim instead of being recomputed,
/// which makes the meta-loss a plain function of the weights (the form a
/// finite-difference check needs).
inline WindowResult run_window(const Optimizee& net, const L2OWeights& weights, const ParamVector& theta0,
                               const LstmState& state0, std::span<const MiniBatch> batches, bool want_grad,
                               const std::vector<ParamVector>* frozen_inputs = nullptr) {
  if (batches.size() < 2) throw Error("meta-train: a window needs at least two batches");
  const std::size_t steps = batches.size() - 1;
  if (frozen_inputs && frozen_inputs->size() != steps) throw Error("meta-train: frozen input count mismatch");
  if (state0.rows() != theta0.size()) throw ShapeError("meta-train: hidden state rows do not match optimizee size");

  const L2OConfig& cfg = weights.config;
  const Preprocessor pre{cfg.preprocess_p};
  ad::Tape tape;
  const auto zeta = zeta_vars(tape, weights.zeta, want_grad);
  LstmVars state = LstmVars::constants(tape, state0);
  ad::Var theta = tape.leaf(theta0.as_tensor(), true);

  WindowResult out;
  ad::Var meta;
  for (std::size_t t = 0; t <= steps; ++t) {
    ad::Var loss = net.forward_loss(theta, batches[t]);
    if (t > 0) meta = meta.valid() ? ad::add(meta, loss) : loss;
    if (t == steps) break;
    ad::Tensor g = frozen_inputs ? (*frozen_inputs)[t].as_tensor() : tape.gradient(loss, theta);
    out.inputs.push_back(ParamVector(theta0.layout(), std::vector<double>(g.values().begin(), g.values().end())));
    ad::Var update = lstm_forward(cfg, zeta, tape.constant(pre.apply(g.values())), state);
    theta = ad::add(theta, ad::scale(update, cfg.output_scale));
  }

  out.meta_loss = meta.value().item();
  out.theta_end = ParamVector(theta0.layout(), std::vector<double>(theta.value().values().begin(), theta.value().values().end()));
  out.state_end = state.values();
  if (want_grad && std::isfinite(out.meta_loss)) {
    tape.backward(meta);
    std::vector<ad::Tensor> grads;
    for (const auto& z : zeta) grads.push_back(z.grad());
    out.zeta_grad = ParamVector::flatten(weights.zeta.layout(), grads);
  }
  return out;
}

/// Per-step training losses of the learned optimizer run from `theta0` for
/// `steps` steps on `sampler`'s training stream. Stops early (shorter result)
/// if a proposal diverges.
inline std::vector<double> l2o_rollout_losses(const Optimizee& net, const L2OWeights& weights, ParamVector theta,
                                              BatchSampler& sampler, std::size_t steps) {
  L2OOptimizer opt(weights);
  opt.reset(theta.size());
  std::vector<double> losses;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto lg = net.loss_and_grad(theta, sampler.next());
    losses.push_back(lg.loss);
    try {
      theta = opt.propose(theta, lg.grad);
    } catch (const DivergenceError&) {
      break;
    }
  }
  return losses;
}

/// Truncated-BPTT meta-training of the learned optimizer on one optimizee and
/// dataset. Each meta-step consumes one truncation window; every
/// rollout/truncation windows a fresh optimizee init and batch stream start.
class MetaTrainer {
 public:
  MetaTrainer(Optimizee net, std::shared_ptr<const Dataset> data, MetaTrainConfig cfg)
      : net_(std::move(net)), data_(std::move(data)), cfg_(cfg) {
    if (cfg_.truncation == 0 || cfg_.rollout == 0) throw ConfigError("meta-train: rollout and truncation must be positive", 0);
    if (cfg_.rollout % cfg_.truncation != 0) {
      throw ConfigError("meta-train: rollout must be a multiple of the truncation length", 0);
    }
    if (!(cfg_.meta_lr > 0.0)) throw ConfigError("meta-train: meta_lr must be positive", 0);
  }

  /// Starts from `init`, or from a seeded random init when absent.
  MetaTrainResult train(std::optional<L2OWeights> init = std::nullopt) {
    MetaTrainResult result{init ? *init : L2OWeights::random(cfg_.l2o, Rng::derive(cfg_.seed, 1)), {}};
    double meta_lr = cfg_.meta_lr;
    FallbackOptimizer adam(FallbackKind::adam, LrSchedule::constant_lr(meta_lr));
    const std::size_t windows = cfg_.rollout / cfg_.truncation;

    std::size_t rollout = 0;
    std::size_t window = windows;  // forces a fresh rollout on the first step
    ParamVector theta;
    LstmState state;
    std::unique_ptr<BatchSampler> sampler;

    for (std::size_t step = 0; step < cfg_.meta_steps; ++step) {
      if (window == windows) {
        const std::uint64_t s = Rng::derive(cfg_.seed, 1000 + rollout);
        theta = net_.init_params(s);
        state = LstmState::zeros(result.weights.config, theta.size());
        sampler = std::make_unique<BatchSampler>(data_, s, cfg_.batch_size);
        window = 0;
        ++rollout;
      }
      const auto batches = sampler->sample(cfg_.truncation + 1);
      WindowResult w = run_window(net_, result.weights, theta, state, batches, true);

      MetaLogRow row{step, rollout - 1, window, w.meta_loss, meta_lr, false};
      const bool ok = std::isfinite(w.meta_loss) && w.zeta_grad.all_finite() && w.theta_end.all_finite();
      if (!ok) {
        row.skipped = true;
        meta_lr *= 0.5;
        FallbackState keep = adam.state();
        adam = FallbackOptimizer(FallbackKind::adam, LrSchedule::constant_lr(meta_lr));
        adam.set_state(std::move(keep));
        window = windows;  // abandon this optimizee
      } else {
        result.weights.zeta = adam.step(result.weights.zeta, w.zeta_grad);
        theta = std::move(w.theta_end);
        state = std::move(w.state_end);
        ++window;
      }
      result.log.push_back(row);
    }
    return result;
  }

 private:
  Optimizee net_;
  std::shared_ptr<const Dataset> data_;
  MetaTrainConfig cfg_;
};

inline void write_meta_log_csv(const std::vector<MetaLogRow>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "meta_step,rollout,window,meta_loss,meta_lr,skipped\n";
  for (const auto& r : log) {
    out << r.meta_step << ',' << r.rollout << ',' << r.window << ',' << r.meta_loss << ',' << r.meta_lr << ','
        << (r.skipped ? 1 : 0) << '\n';
  }
}

}  // namespace lgl2o
