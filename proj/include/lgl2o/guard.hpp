// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
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

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class Branch { l2o, fallback };

inline std::string to_string(Branch b) { return b == Branch::l2o ? "l2o" : "fallback"; }

/// One safeguard check.
struct GuardDecision {
  std::size_t block = 0;
  std::uint64_t step = 0;  // optimizer step at which the block started
  double l2o_loss = kInf;
  double fallback_loss = kInf;
  Branch chosen = Branch::fallback;
  std::size_t n_t = 1;
  std::size_t n_c = 1;

  /// 1.0 when the learned optimizer won, 0.5 otherwise.
  double use_l2o() const noexcept { return chosen == Branch::l2o ? 1.0 : 0.5; }
  double committed_loss() const noexcept { return chosen == Branch::l2o ? l2o_loss : fallback_loss; }
};

/// Strict comparison; ties and NaNs go to the fallback.
inline Branch choose(double l2o_loss, double fallback_loss) {
  return l2o_loss < fallback_loss ? Branch::l2o : Branch::fallback;
}

/// Work performed by a guard, in oracle calls.
struct GuardCounters {
  std::uint64_t gradient_calls = 0;
  std::uint64_t loss_evaluations = 0;      // single-batch loss evaluations
  std::uint64_t validation_estimates = 0;  // averaged candidate losses
  /// Gradient calls on the critical path when independent rollouts run
  /// concurrently.
  std::uint64_t sequential_gradient_depth = 0;
  std::uint64_t steps = 0;
};

// ---------------------------------------------------------------------------
// Deterministic guard over a full-loss oracle.

template <class F>
concept FullObjective = requires(const F& f, const ParamVector& x) {
  { f.value(x) } -> std::convertible_to<double>;
  { f.gradient(x) } -> std::convertible_to<ParamVector>;
};

struct DeterministicTrace {
  std::vector<ParamVector> points;  // x_1 .. x_{steps+1}
  std::vector<GuardDecision> decisions;
  std::vector<double> lrs;
};

/// x <- y if F(y) < F(z) else z, with y = L2O(x) and z = x - lr * grad F(x),
/// for `steps` steps. A throwing or non-finite L2O proposal scores +inf.
template <FullObjective F>
DeterministicTrace lgl2o_deterministic(const F& objective, UpdateRule& l2o, FallbackOptimizer& fallback, ParamVector x,
                                       std::size_t steps) {
  DeterministicTrace trace;
  trace.points.push_back(x);
  for (std::size_t k = 0; k < steps; ++k) {
    const ParamVector g = objective.gradient(x);
    double fy = kInf;
    ParamVector y;
    try {
      y = l2o.propose(x, g);
      if (y.all_finite()) fy = objective.value(y);
    } catch (const DivergenceError&) {
    }
    if (!std::isfinite(fy)) fy = kInf;

    FallbackProposal z = fallback.propose(x, g);
    if (!z.point.all_finite()) throw DivergenceError("lgl2o: fallback diverged at step " + std::to_string(k), k);
    const double fz = objective.value(z.point);
    if (!std::isfinite(fz)) throw DivergenceError("lgl2o: fallback loss non-finite at step " + std::to_string(k), k);

    GuardDecision d{k, k, fy, fz, choose(fy, fz), 1, 1};
    trace.lrs.push_back(z.lr);
    if (d.chosen == Branch::l2o) {
      x = std::move(y);
      FallbackState s = fallback.state();
      s.step = z.next.step;
      fallback.commit(std::move(s));
    } else {
      x = std::move(z.point);
      fallback.commit(z);
    }
    trace.decisions.push_back(d);
    trace.points.push_back(x);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Stochastic, block-wise guard.

/// A source of training/validation batches plus loss and gradient oracles.
template <class P>
concept GuardProblem = requires(P& p, const P& cp, const ParamVector& x, const typename P::Batch& b,
                                std::span<const typename P::Batch> exclude, std::size_t n) {
  { p.sample_train(n) } -> std::same_as<std::vector<typename P::Batch>>;
  { p.sample_validation(n, exclude) } -> std::same_as<std::vector<typename P::Batch>>;
  { cp.gradient(x, b) } -> std::same_as<LossAndGrad>;
  { cp.loss(x, b) } -> std::convertible_to<double>;
};

/// Optimizee + dataset sampler.
class DatasetProblem {
 public:
  using Batch = MiniBatch;

  DatasetProblem(const Optimizee& net, BatchSampler& sampler) : net_(&net), sampler_(&sampler) {}

  std::vector<Batch> sample_train(std::size_t n) { return sampler_->sample(n); }
  std::vector<Batch> sample_validation(std::size_t n, std::span<const Batch> exclude) {
    return sampler_->sample_validation(n, exclude);
  }
  LossAndGrad gradient(const ParamVector& x, const Batch& b) const { return net_->loss_and_grad(x, b); }
  double loss(const ParamVector& x, const Batch& b) const { return net_->loss(x, b); }

 private:
  const Optimizee* net_;
  BatchSampler* sampler_;
};

struct LGL2OConfig {
  std::size_t n_t = 10;
  std::size_t n_c = 10;
  std::uint64_t total_steps = 1000;
  bool adaptive = false;
  double growth = 2.0;
  std::size_t cap = 5000;
  bool parallel_rollouts = false;

  void validate() const {
    if (n_t == 0 || n_c == 0) throw ConfigError("lgl2o: n_t and n_c must be at least 1", 0);
    if (adaptive && !(growth > 1.0)) throw ConfigError("lgl2o: growth factor must exceed 1", 0);
    if (cap < std::max(n_t, n_c)) throw ConfigError("lgl2o: cap below initial n_t/n_c", 0);
  }
};

/// Per-step record of a guarded run.
struct StepRecord {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double use_l2o = 0.0;
};

template <class Batch>
using BlockObserver =
    std::function<void(const GuardDecision&, const ParamVector& committed, std::span<const Batch> validation)>;

struct GuardRun {
  ParamVector final_point;
  std::vector<StepRecord> steps;
  std::vector<GuardDecision> decisions;
  GuardCounters counters;
  /// Set when the run stopped early on a divergence; steps and final_point
  /// then cover the completed part.
  std::optional<std::string> failure;

  bool ok() const noexcept { return !failure.has_value(); }
};

namespace detail {

struct Rollout {
  ParamVector point;
  std::vector<double> losses;
  bool finite = true;
};

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Block-wise loss-guarded learned optimization. Each block rolls both
/// optimizers n_t steps from the committed point on the same training
/// batches, estimates each terminal point's loss on n_c held-out batches and
/// commits the strictly better one (ties go to the fallback).
///
/// The fallback's learning-rate clock always advances by n_t; its moment
/// state is kept only when its block wins. A diverging learned optimizer
/// scores +inf; a diverging fallback ends the run with `failure` set.
template <GuardProblem P>
GuardRun lgl2o_stochastic(P& problem, UpdateRule& l2o, FallbackOptimizer& fallback, ParamVector x,
                          const LGL2OConfig& cfg, const BlockObserver<typename P::Batch>& observer = {}) {
  using Batch = typename P::Batch;
  cfg.validate();
  GuardRun run;
  std::size_t n_t = cfg.n_t;
  std::size_t n_c = cfg.n_c;
  std::uint64_t k = 0;

  try {
    for (std::size_t block = 0; k < cfg.total_steps; ++block) {
      const std::size_t steps = static_cast<std::size_t>(std::min<std::uint64_t>(n_t, cfg.total_steps - k));
      const std::vector<Batch> train = problem.sample_train(steps);
      const FallbackState start = fallback.state();

      auto roll_l2o = [&]() {
        detail::Rollout r{x, {}, true};
        try {
          for (const Batch& b : train) {
            const LossAndGrad lg = problem.gradient(r.point, b);
            r.losses.push_back(lg.loss);
            if (!lg.grad.all_finite()) throw DivergenceError("l2o rollout: non-finite gradient", k);
            r.point = l2o.propose(r.point, lg.grad);
          }
        } catch (const DivergenceError&) {
          r.finite = false;
        }
        r.finite = r.finite && r.point.all_finite();
        return r;
      };
      std::vector<double> lrs;
      FallbackState next = start;
      auto roll_fallback = [&]() {
        detail::Rollout r{x, {}, true};
        for (const Batch& b : train) {
          const LossAndGrad lg = problem.gradient(r.point, b);
          r.losses.push_back(lg.loss);
          FallbackProposal p = fallback.propose_from(next, r.point, lg.grad);
          lrs.push_back(p.lr);
          r.point = std::move(p.point);
          next = std::move(p.next);
        }
        if (!r.point.all_finite()) throw DivergenceError("lgl2o: fallback diverged in block " + std::to_string(block), k);
        return r;
      };

      detail::Rollout y;
      detail::Rollout z;
      if (cfg.parallel_rollouts) {
        auto pending = std::async(std::launch::async, roll_l2o);
        z = roll_fallback();
        y = pending.get();
      } else {
        y = roll_l2o();
        z = roll_fallback();
      }
      run.counters.gradient_calls += y.losses.size() + z.losses.size();
      run.counters.sequential_gradient_depth += std::max(y.losses.size(), z.losses.size());

      const std::vector<Batch> validation = problem.sample_validation(n_c, train);
      std::vector<double> ly;
      std::vector<double> lz;
      for (const Batch& v : validation) {
        if (y.finite) ly.push_back(problem.loss(y.point, v));
        lz.push_back(problem.loss(z.point, v));
      }
      run.counters.loss_evaluations += ly.size() + lz.size();
      run.counters.validation_estimates += 2;

      GuardDecision d;
      d.block = block;
      d.step = k;
      d.n_t = steps;
      d.n_c = n_c;
      d.l2o_loss = y.finite ? detail::mean(ly) : kInf;
      if (!std::isfinite(d.l2o_loss)) d.l2o_loss = kInf;
      d.fallback_loss = detail::mean(lz);
      if (!std::isfinite(d.fallback_loss)) {
        throw DivergenceError("lgl2o: fallback validation loss non-finite in block " + std::to_string(block), k);
      }
      d.chosen = choose(d.l2o_loss, d.fallback_loss);

      const detail::Rollout& won = d.chosen == Branch::l2o ? y : z;
      for (std::size_t i = 0; i < steps; ++i) {
        run.steps.push_back({k + i, won.losses.at(i), lrs[i], d.use_l2o()});
      }
      if (d.chosen == Branch::l2o) {
        x = y.point;
        FallbackState s = start;
        s.step = next.step;
        fallback.commit(std::move(s));
      } else {
        x = z.point;
        fallback.commit(std::move(next));
      }
      if (observer) observer(d, x, validation);
      run.decisions.push_back(d);

      if (cfg.adaptive && y.finite) {
        const double my = detail::mean(ly), sy = detail::stddev(ly);
        const double mz = detail::mean(lz), sz = detail::stddev(lz);
        const bool overlap = my - sy <= mz + sz && mz - sz <= my + sy;
        if (overlap) {
          n_t = std::min(cfg.cap, static_cast<std::size_t>(std::ceil(static_cast<double>(n_t) * cfg.growth)));
          n_c = std::min(cfg.cap, static_cast<std::size_t>(std::ceil(static_cast<double>(n_c) * cfg.growth)));
        }
      }
      k += steps;
    }
  } catch (const DivergenceError& e) {
    run.failure = e.what();
  }
  run.counters.steps = run.steps.size();
  run.final_point = std::move(x);
  return run;
}

// ---------------------------------------------------------------------------
// Step-size safeguarded baseline (GL2O).

enum class SafeguardSequence { exponential_moving_average, recent_max };

struct GL2OConfig {
  double alpha = 0.99;
  double theta = 0.9;
  std::size_t m = 30;
  SafeguardSequence sequence = SafeguardSequence::exponential_moving_average;
  std::uint64_t total_steps = 1000;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("gl2o: alpha must lie in (0, 1)", 0);
    if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("gl2o: theta must lie in (0, 1)", 0);
    if (m == 0) throw ConfigError("gl2o: m must be at least 1", 0);
  }
};

/// Reference step size mu_k that L2O proposals are compared against.
class SafeguardTracker {
 public:
  explicit SafeguardTracker(const GL2OConfig& cfg) : cfg_(cfg) {}

  bool initialised() const noexcept { return init_; }
  double value() const noexcept { return mu_; }

  void start(double d) {
    mu_ = d;
    init_ = true;
    recent_.assign(1, d);
  }

  /// Folds in the step size observed at an accepted L2O proposal.
  void accept(double d) {
    if (cfg_.sequence == SafeguardSequence::exponential_moving_average) {
      mu_ = cfg_.theta * mu_ + (1.0 - cfg_.theta) * d;
      return;
    }
    recent_.push_back(d);
    while (recent_.size() > cfg_.m) recent_.pop_front();
    mu_ = *std::max_element(recent_.begin(), recent_.end());
  }

 private:
  GL2OConfig cfg_;
  double mu_ = 0.0;
  bool init_ = false;
  std::deque<double> recent_;
};

/// Per step: y = L2O(x, g_x); d = lr * ||grad F(y, b)||; accept y when
/// d <= alpha * mu_k, else take z = x - lr * g_x. Two sequential gradient
/// calls per step.
template <GuardProblem P>
GuardRun gl2o_run(P& problem, UpdateRule& l2o, FallbackOptimizer& fallback, ParamVector x, const GL2OConfig& cfg) {
  using Batch = typename P::Batch;
  cfg.validate();
  GuardRun run;
  SafeguardTracker tracker(cfg);

  try {
    for (std::uint64_t k = 0; k < cfg.total_steps; ++k) {
      const std::vector<Batch> batch = problem.sample_train(1);
      const LossAndGrad gx = problem.gradient(x, batch.front());
      const double lr = fallback.current_lr();
      if (!tracker.initialised()) tracker.start(lr * gx.grad.norm());

      GuardDecision d;
      d.block = k;
      d.step = k;
      ParamVector y;
      bool finite = true;
      try {
        y = l2o.propose(x, gx.grad);
        finite = y.all_finite();
      } catch (const DivergenceError&) {
        finite = false;
      }
      double dy = kInf;
      std::uint64_t calls = 1;
      if (finite) {
        const LossAndGrad gy = problem.gradient(y, batch.front());
        ++calls;
        if (std::isfinite(gy.loss) && gy.grad.all_finite()) dy = lr * gy.grad.norm();
      }
      // the call at y needs y, which needs the call at x
      run.counters.gradient_calls += calls;
      run.counters.sequential_gradient_depth += calls;
      // GL2O compares step sizes, not losses: the decision carries the
      // measured step size and the threshold it was held against.
      d.l2o_loss = dy;
      d.fallback_loss = cfg.alpha * tracker.value();

      FallbackProposal z = fallback.propose(x, gx.grad);
      if (dy <= cfg.alpha * tracker.value()) {
        d.chosen = Branch::l2o;
        tracker.accept(dy);
        x = std::move(y);
        FallbackState s = fallback.state();
        s.step = z.next.step;
        fallback.commit(std::move(s));
      } else {
        d.chosen = Branch::fallback;
        if (!z.point.all_finite()) throw DivergenceError("gl2o: fallback diverged at step " + std::to_string(k), k);
        x = std::move(z.point);
        fallback.commit(z);
      }
      run.steps.push_back({k, gx.loss, lr, d.use_l2o()});
      run.decisions.push_back(d);
    }
  } catch (const DivergenceError& e) {
    run.failure = e.what();
  }
  run.counters.steps = run.steps.size();
  run.final_point = std::move(x);
  return run;
}

// ---------------------------------------------------------------------------
// Unguarded runs on the same problem interface.

/// Plain fallback optimizer for `steps` steps.
template <GuardProblem P>
GuardRun fallback_run(P& problem, FallbackOptimizer& fallback, ParamVector x, std::uint64_t steps) {
  GuardRun run;
  try {
    for (std::uint64_t k = 0; k < steps; ++k) {
      const auto batch = problem.sample_train(1);
      const LossAndGrad g = problem.gradient(x, batch.front());
      const double lr = fallback.current_lr();
      x = fallback.step(x, g.grad);
      if (!x.all_finite()) throw DivergenceError("fallback diverged at step " + std::to_string(k), k);
      run.steps.push_back({k, g.loss, lr, 0.0});
      ++run.counters.gradient_calls;
      ++run.counters.sequential_gradient_depth;
    }
  } catch (const DivergenceError& e) {
    run.failure = e.what();
  }
  run.counters.steps = run.steps.size();
  run.final_point = std::move(x);
  return run;
}

/// Learned optimizer alone, stopping at the first non-finite loss or
/// proposal.
template <GuardProblem P>
GuardRun l2o_run(P& problem, UpdateRule& l2o, ParamVector x, std::uint64_t steps) {
  GuardRun run;
  try {
    for (std::uint64_t k = 0; k < steps; ++k) {
      const auto batch = problem.sample_train(1);
      const LossAndGrad g = problem.gradient(x, batch.front());
      if (!std::isfinite(g.loss) || !g.grad.all_finite()) {
        throw DivergenceError("l2o: non-finite loss at step " + std::to_string(k), k);
      }
      run.steps.push_back({k, g.loss, 0.0, 1.0});
      x = l2o.propose(x, g.grad);
      ++run.counters.gradient_calls;
      ++run.counters.sequential_gradient_depth;
    }
  } catch (const DivergenceError& e) {
    run.failure = e.what();
  }
  run.counters.steps = run.steps.size();
  run.final_point = std::move(x);
  return run;
}

}  // namespace lgl2o
