// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lgl2o/error.hpp"
#include "lgl2o/optimizee.hpp"

namespace lgl2o {

/// Learning rate as a function of the optimizer step t (0-based).
///
///  - constant:    lr0
///  - power_decay: lr0 / (t / time_scale + 1)^power, power 1.5 by default
///  - theorem:     alpha_t / L with alpha_t = min(1, 2*mu*L, 8*mu*L / (t + i0))
struct LrSchedule {
  enum class Kind { constant, power_decay, theorem };

  Kind kind = Kind::constant;
  double lr0 = 0.1;
  double time_scale = 50000.0;
  double power = 1.5;
  double mu = 1.0;
  double smoothness = 1.0;
  double i0 = 1.0;

  static LrSchedule constant_lr(double lr) { return {Kind::constant, lr}; }

  static LrSchedule power_decay(double lr0, double time_scale, double power = 1.5) {
    LrSchedule s{Kind::power_decay, lr0};
    s.time_scale = time_scale;
    s.power = power;
    return s;
  }

  static LrSchedule theorem(double mu, double smoothness, double i0) {
    LrSchedule s{Kind::theorem};
    s.mu = mu;
    s.smoothness = smoothness;
    s.i0 = i0;
    return s;
  }

  /// The dimensionless alpha_t of the theorem schedule.
  double alpha(std::uint64_t t) const {
    const double muL = mu * smoothness;
    return std::min({1.0, 2.0 * muL, 8.0 * muL / (static_cast<double>(t) + i0)});
  }

  double operator()(std::uint64_t t) const {
    switch (kind) {
      case Kind::constant: return lr0;
      case Kind::power_decay: return lr0 / std::pow(static_cast<double>(t) / time_scale + 1.0, power);
      case Kind::theorem: return alpha(t) / smoothness;
    }
    return lr0;
  }
};

enum class FallbackKind { sgd_nm, sgd_momentum, adam };

inline std::string to_string(FallbackKind k) {
  switch (k) {
    case FallbackKind::sgd_nm: return "sgdnm";
    case FallbackKind::sgd_momentum: return "sgd";
    case FallbackKind::adam: return "adam";
  }
  return "?";
}

struct FallbackHyper {
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Everything a fallback optimizer carries between steps. `step` drives the
/// learning-rate schedule; `updates` counts moment updates (Adam bias
/// correction). They differ when a guard advances the clock without
/// accepting the fallback's moments.
struct FallbackState {
  std::uint64_t step = 0;
  std::uint64_t updates = 0;
  std::vector<double> first;   // momentum buffer / Adam first moment
  std::vector<double> second;  // Adam second moment

  friend bool operator==(const FallbackState&, const FallbackState&) = default;
};

struct FallbackProposal {
  ParamVector point;
  FallbackState next;
  double lr = 0.0;
};

/// Hand-crafted optimizer with a two-phase step: propose() computes the next
/// iterate and the state that would follow without touching the optimizer;
/// commit() installs that state. A guard that rejects the proposal simply
/// never commits it.
class FallbackOptimizer {
 public:
  FallbackOptimizer(FallbackKind kind, LrSchedule schedule, FallbackHyper hyper = {})
      : kind_(kind), schedule_(schedule), hyper_(hyper) {}

  FallbackKind kind() const noexcept { return kind_; }
  const LrSchedule& schedule() const noexcept { return schedule_; }
  const FallbackHyper& hyper() const noexcept { return hyper_; }
  const FallbackState& state() const noexcept { return state_; }
  void set_state(FallbackState s) { state_ = std::move(s); }

  double lr_at(std::uint64_t t) const { return schedule_(t); }
  double current_lr() const { return schedule_(state_.step); }

  FallbackProposal propose(const ParamVector& x, const ParamVector& g) const { return propose_from(state_, x, g); }

  FallbackProposal propose_from(const FallbackState& from, const ParamVector& x, const ParamVector& g) const {
    if (x.size() != g.size()) {
      throw ShapeError("fallback: iterate has " + std::to_string(x.size()) + " entries, gradient " + std::to_string(g.size()));
    }
    if (!g.all_finite()) throw DivergenceError("fallback: non-finite gradient at step " + std::to_string(from.step), from.step);

    FallbackProposal p{x, from, schedule_(from.step)};
    p.next.step = from.step + 1;
    const double lr = p.lr;
    const std::size_t n = x.size();
    switch (kind_) {
      case FallbackKind::sgd_nm:
        for (std::size_t i = 0; i < n; ++i) p.point[i] = x[i] - lr * g[i];
        break;
      case FallbackKind::sgd_momentum: {
        auto& buf = p.next.first;
        if (buf.size() != n) buf.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          buf[i] = hyper_.momentum * buf[i] + g[i];
          p.point[i] = x[i] - lr * buf[i];
        }
        ++p.next.updates;
        break;
      }
      case FallbackKind::adam: {
        auto& m = p.next.first;
        auto& v = p.next.second;
        if (m.size() != n) m.assign(n, 0.0);
        if (v.size() != n) v.assign(n, 0.0);
        const std::uint64_t t = ++p.next.updates;
        const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < n; ++i) {
          m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
          v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
          p.point[i] = x[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.epsilon);
        }
        break;
      }
    }
    return p;
  }

  void commit(FallbackState next) { state_ = std::move(next); }
  void commit(const FallbackProposal& p) { state_ = p.next; }

  /// propose + commit.
  ParamVector step(const ParamVector& x, const ParamVector& g) {
    FallbackProposal p = propose(x, g);
    state_ = std::move(p.next);
    return std::move(p.point);
  }

 private:
  FallbackKind kind_;
  LrSchedule schedule_;
  FallbackHyper hyper_;
  FallbackState state_;
};

}  // namespace lgl2o
