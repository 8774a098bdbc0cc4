// SPDX-License-Identifier: Apache-2.0
#pragma once

// Strongly convex quadratic objectives with known curvature bounds, and
// checkers for the descent, Lyapunov, PL and convergence inequalities that
// the loss guard is meant to preserve.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lgl2o/error.hpp"
#include "lgl2o/fallback.hpp"
#include "lgl2o/guard.hpp"
#include "lgl2o/l2o.hpp"
#include "lgl2o/optimizee.hpp"
#include "lgl2o/rng.hpp"

namespace lgl2o {

inline Eigen::VectorXd to_eigen(const ParamVector& p) {
  return Eigen::Map<const Eigen::VectorXd>(p.values().data(), static_cast<Eigen::Index>(p.size()));
}

inline ParamVector from_eigen(const Eigen::VectorXd& v) {
  return ParamVector::flat(std::vector<double>(v.data(), v.data() + v.size()));
}

/// f(w) = 1/2 w'Aw - b'w with A symmetric positive definite.
class QuadraticObjective {
 public:
  QuadraticObjective(Eigen::MatrixXd a, Eigen::VectorXd b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.rows() != a_.cols() || a_.rows() != b_.size() || a_.rows() == 0) {
      throw ShapeError("quadratic: A must be square and match b");
    }
    if (!a_.isApprox(a_.transpose(), 1e-12)) throw Error("quadratic: A is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a_);
    mu_ = eig.eigenvalues().minCoeff();
    smoothness_ = eig.eigenvalues().maxCoeff();
    if (!(mu_ > 0.0)) throw Error("quadratic: A is not positive definite");
    w_star_ = a_.ldlt().solve(b_);
  }

  /// A = Q diag(eigs) Q' with Q a random orthogonal matrix (QR of a Gaussian
  /// matrix), eigenvalues uniform in [lo, hi] with lo and hi both attained
  /// when dim > 1, b Gaussian.
  static QuadraticObjective random(std::size_t dim, std::uint64_t seed, double lo = 1.0, double hi = 10.0) {
    if (dim == 0) throw Error("quadratic: dimension must be positive");
    Rng rng(seed);
    const auto n = static_cast<Eigen::Index>(dim);
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    Eigen::VectorXd eigs(n);
    for (Eigen::Index i = 0; i < n; ++i) eigs(i) = rng.uniform(lo, hi);
    eigs(0) = lo;
    if (n > 1) eigs(n - 1) = hi;
    Eigen::MatrixXd a = q * eigs.asDiagonal() * q.transpose();
    a = 0.5 * (a + a.transpose());
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) b(i) = rng.normal();
    return {std::move(a), std::move(b)};
  }

  static QuadraticObjective isotropic(std::size_t dim, double mu, Eigen::VectorXd b) {
    return {mu * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)), std::move(b)};
  }

  std::size_t dim() const noexcept { return static_cast<std::size_t>(b_.size()); }
  double mu() const noexcept { return mu_; }
  double smoothness() const noexcept { return smoothness_; }
  const Eigen::MatrixXd& a() const noexcept { return a_; }
  const Eigen::VectorXd& b() const noexcept { return b_; }
  ParamVector minimizer() const { return from_eigen(w_star_); }

  double value(const ParamVector& w) const {
    const Eigen::VectorXd x = to_eigen(w);
    return 0.5 * x.dot(a_ * x) - b_.dot(x);
  }
  ParamVector gradient(const ParamVector& w) const { return from_eigen(a_ * to_eigen(w) - b_); }

  /// E(w) = f(w) - f(w*), evaluated as 1/2 (w-w*)'A(w-w*) to avoid
  /// cancellation.
  double excess(const ParamVector& w) const {
    if (!w.all_finite()) return std::numeric_limits<double>::infinity();
    const Eigen::VectorXd d = to_eigen(w) - w_star_;
    return 0.5 * d.dot(a_ * d);
  }

  double grad_norm2(const ParamVector& w) const { return (a_ * to_eigen(w) - b_).squaredNorm(); }

 private:
  Eigen::MatrixXd a_;
  Eigen::VectorXd b_;
  Eigen::VectorXd w_star_;
  double mu_ = 0.0;
  double smoothness_ = 0.0;
};

/// Gradient oracle returning grad f(w) + xi with xi ~ N(0, sigma_g^2 I).
/// Training batches are noise draws; validation batches evaluate f exactly.
class NoisyGradientOracle {
 public:
  struct Batch {
    std::vector<double> noise;  // empty: exact
  };

  NoisyGradientOracle(const QuadraticObjective& f, double sigma_g, std::uint64_t seed)
      : f_(&f), sigma_g_(sigma_g), rng_(seed) {
    if (!(sigma_g >= 0.0)) throw Error("oracle: noise level must be non-negative");
  }

  /// sigma^2 = E||xi||^2 = d * sigma_g^2.
  double sigma2() const noexcept { return static_cast<double>(f_->dim()) * sigma_g_ * sigma_g_; }
  const QuadraticObjective& objective() const noexcept { return *f_; }

  std::vector<Batch> sample_train(std::size_t n) {
    std::vector<Batch> out(n);
    for (auto& b : out) {
      b.noise.resize(f_->dim());
      for (double& v : b.noise) v = sigma_g_ * rng_.normal();
    }
    return out;
  }
  std::vector<Batch> sample_validation(std::size_t n, std::span<const Batch>) { return std::vector<Batch>(n); }

  LossAndGrad gradient(const ParamVector& w, const Batch& batch) const {
    ParamVector g = f_->gradient(w);
    for (std::size_t i = 0; i < batch.noise.size(); ++i) g[i] += batch.noise[i];
    return {f_->value(w), std::move(g)};
  }
  double loss(const ParamVector& w, const Batch&) const { return f_->value(w); }

 private:
  const QuadraticObjective* f_;
  double sigma_g_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Checkers. Each returns the largest violation (positive = inequality
// broken) and the first step or point index where it exceeded the slack.

inline constexpr double kTheoremSlack = 1e-10;

struct CheckResult {
  explicit CheckResult(std::string n = {}) : name(std::move(n)) {}

  std::string name;
  double max_violation = -std::numeric_limits<double>::infinity();
  std::optional<std::size_t> first_violation;
  std::size_t checked = 0;
  bool pass = true;

  void observe(double violation, std::size_t index, double slack = kTheoremSlack) {
    ++checked;
    if (std::isnan(violation)) violation = std::numeric_limits<double>::infinity();
    max_violation = std::max(max_violation, violation);
    if (violation > slack) {
      pass = false;
      if (!first_violation) first_violation = index;
    }
  }

  /// Folds another result on the same inequality into this one.
  void merge(const CheckResult& other) {
    if (other.checked == 0) return;
    max_violation = std::max(max_violation, other.max_violation);
    if (!other.pass && pass) first_violation = other.first_violation;
    pass = pass && other.pass;
    checked += other.checked;
  }
};

/// alpha_i = lr_i * L for every step of a trajectory.
inline std::vector<double> alphas_from_lrs(std::span<const double> lrs, double smoothness) {
  std::vector<double> out(lrs.begin(), lrs.end());
  for (double& a : out) a *= smoothness;
  return out;
}

/// E(w_{i+1}) - E(w_i) <= -(a_i/L)(1 - a_i/2)||grad f(w_i)||^2 and
/// E(w_i) >= (a_i/L)(1 - a_i/2)||grad f(w_i)||^2, per step.
inline std::pair<CheckResult, CheckResult> check_descent_inequality(std::span<const ParamVector> points,
                                                                    const QuadraticObjective& f,
                                                                    std::span<const double> alphas) {
  if (points.size() != alphas.size() + 1) throw Error("descent check: need one alpha per step");
  CheckResult descent("descent");
  CheckResult lower("suboptimality-lower-bound");
  const double L = f.smoothness();
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const double a = alphas[i];
    const double coeff = (a / L) * (1.0 - a / 2.0) * f.grad_norm2(points[i]);
    descent.observe(f.excess(points[i + 1]) - f.excess(points[i]) + coeff, i);
    lower.observe(coeff - f.excess(points[i]), i);
  }
  return {descent, lower};
}

/// E(w_{i+1}) <= E(w_i) and E(w_i) >= 0 along the trajectory.
inline CheckResult check_lyapunov(std::span<const ParamVector> points, const QuadraticObjective& f) {
  CheckResult r("lyapunov");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double e = f.excess(points[i]);
    r.observe(-e, i);
    if (i + 1 < points.size()) r.observe(f.excess(points[i + 1]) - e, i);
  }
  return r;
}

/// E(w) <= ||grad f(w)||^2 / (2 mu) at every point, with mu as claimed.
inline CheckResult check_pl_condition(const QuadraticObjective& f, std::span<const ParamVector> points,
                                      std::optional<double> claimed_mu = std::nullopt) {
  const double mu = claimed_mu.value_or(f.mu());
  CheckResult r("polyak-lojasiewicz");
  for (std::size_t i = 0; i < points.size(); ++i) r.observe(f.excess(points[i]) - f.grad_norm2(points[i]) / (2.0 * mu), i);
  return r;
}

/// Per-step contraction factor of the gradient-descent envelope.
inline double gd_envelope_rate(double alpha, double mu, double smoothness) {
  return 1.0 - (alpha / (2.0 * mu * smoothness)) * (1.0 - alpha / 2.0);
}

/// E(w_i) <= rate^i E(w_0) for a run with constant step alpha/L. Refuses
/// alpha outside ]0, min(2, 2 mu L)[.
inline CheckResult check_gd_convergence(std::span<const ParamVector> points, const QuadraticObjective& f, double alpha) {
  const double upper = std::min(2.0, 2.0 * f.mu() * f.smoothness());
  if (!(alpha > 0.0 && alpha < upper)) {
    std::ostringstream os;
    os << "gd envelope: alpha " << alpha << " outside ]0, " << upper << "[";
    throw Error(os.str());
  }
  const double rate = gd_envelope_rate(alpha, f.mu(), f.smoothness());
  CheckResult r("gd-envelope");
  const double e0 = f.excess(points.front());
  double bound = e0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    r.observe(f.excess(points[i]) - bound, i);
    bound *= rate;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Stochastic convergence.

/// Constants of the decaying-step convergence argument for one objective,
/// start point and noise level.
struct SgdConstants {
  double mu = 0.0;
  double smoothness = 0.0;
  double sigma2 = 0.0;
  double c = 0.0;   // 32 mu^2 L sigma^2
  double i0 = 0.0;  // C / E(w_0)

  static SgdConstants make(const QuadraticObjective& f, double sigma2, double e0) {
    SgdConstants k{f.mu(), f.smoothness(), sigma2};
    k.c = 32.0 * k.mu * k.mu * k.smoothness * sigma2;
    k.i0 = k.c / e0;
    return k;
  }

  double envelope(double i) const { return c / (i + i0 + 1.0); }
  LrSchedule schedule() const { return LrSchedule::theorem(mu, smoothness, i0); }
};

/// Per-coordinate noise level that makes i0 = 16 mu L for start point w0, so
/// that 8 mu L / (i + i0) <= 1/2 for all i.
inline double theorem_noise_level(const QuadraticObjective& f, const ParamVector& w0) {
  const double sigma2 = f.excess(w0) / (2.0 * f.mu());
  return std::sqrt(sigma2 / static_cast<double>(f.dim()));
}

struct SgdRun {
  std::vector<double> excess;  // E(w_i), i = 0..steps
  std::vector<double> alphas;  // alpha_i used at step i
  std::vector<double> grad_norm2;
};

/// One guarded stochastic run (blocks of one step, exact validation loss).
inline SgdRun guarded_sgd_run(const QuadraticObjective& f, UpdateRule& l2o, const ParamVector& w0, double sigma_g,
                              const LrSchedule& schedule, std::size_t steps, std::uint64_t seed) {
  NoisyGradientOracle oracle(f, sigma_g, seed);
  FallbackOptimizer fallback(FallbackKind::sgd_nm, schedule);
  SgdRun out;
  out.excess.push_back(f.excess(w0));
  out.grad_norm2.push_back(f.grad_norm2(w0));
  LGL2OConfig cfg;
  cfg.n_t = 1;
  cfg.n_c = 1;
  cfg.total_steps = steps;
  BlockObserver<NoisyGradientOracle::Batch> observe = [&](const GuardDecision&, const ParamVector& x, auto) {
    out.excess.push_back(f.excess(x));
    out.grad_norm2.push_back(f.grad_norm2(x));
  };
  const GuardRun run = lgl2o_stochastic(oracle, l2o, fallback, w0, cfg, observe);
  for (const auto& s : run.steps) out.alphas.push_back(s.lr * f.smoothness());
  return out;
}

/// Seed-averaged checks for one objective: the expected per-step descent
/// bound, and mean E(w_i) <= (1 + tolerance) C / (i + i0 + 1) at each
/// checkpoint.
struct SgdCheck {
  CheckResult expected_descent{std::string("expected-descent")};
  CheckResult envelope{std::string("sgd-envelope")};
  std::vector<double> mean_excess;  // at checkpoints
  std::vector<double> bound;        // at checkpoints
};

inline SgdCheck check_sgd_convergence(std::span<const SgdRun> runs, const SgdConstants& k,
                                      std::span<const std::size_t> checkpoints, double tolerance = 0.5) {
  if (runs.empty()) throw Error("sgd check: no runs");
  SgdCheck out;
  // Expected descent: D = [E_{i+1} - E_i] - rhs_i has non-positive
  // conditional mean. Averaged over all (seed, step) pairs, a mean more than
  // three standard errors above zero counts as a violation.
  double sum = 0.0;
  double sum2 = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      const double a = r.alphas[i];
      const double rhs = -(a / k.smoothness) * (1.0 - a / 2.0) * (r.grad_norm2[i] - a * k.sigma2 / (2.0 * (1.0 - a / 2.0)));
      const double d = (r.excess[i + 1] - r.excess[i]) - rhs;
      sum += d;
      sum2 += d * d;
      ++n;
    }
  }
  if (n > 0) {
    const double mean = sum / static_cast<double>(n);
    const double var = n > 1 ? (sum2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1) : 0.0;
    const double stderr_ = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
    out.expected_descent.observe(mean - 3.0 * stderr_, 0, 0.0);
  }
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    const std::size_t i = checkpoints[c];
    double m = 0.0;
    for (const auto& r : runs) {
      if (i >= r.excess.size()) throw Error("sgd check: checkpoint beyond run length");
      m += r.excess[i] / static_cast<double>(runs.size());
    }
    const double bound = (1.0 + tolerance) * k.envelope(static_cast<double>(i));
    out.mean_excess.push_back(m);
    out.bound.push_back(bound);
    out.envelope.observe(m - bound, i, 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Test L2Os.

/// y = x.
inline FunctionRule identity_rule() {
  return FunctionRule([](const ParamVector& x, const ParamVector&) { return x; });
}

/// y = x + offset in every coordinate.
inline FunctionRule shifting_rule(double offset) {
  return FunctionRule([offset](const ParamVector& x, const ParamVector&) {
    ParamVector y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += offset;
    return y;
  });
}

/// y = w*.
inline FunctionRule minimizer_rule(const QuadraticObjective& f) {
  return FunctionRule([w = f.minimizer()](const ParamVector&, const ParamVector&) { return w; });
}

/// Mixes good and bad behaviour at random: scaled gradient steps of random
/// size, random jumps, and NaN proposals.
class RandomRule final : public UpdateRule {
 public:
  RandomRule(std::uint64_t seed, double max_step) : rng_(seed), max_step_(max_step) {}

  ParamVector propose(const ParamVector& x, const ParamVector& g) override {
    ParamVector y = x;
    const double u = rng_.uniform();
    if (u < 0.1) {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::numeric_limits<double>::quiet_NaN();
    } else if (u < 0.3) {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += rng_.normal();
    } else {
      const double c = rng_.uniform(0.0, max_step_);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] -= c * g[i];
    }
    return y;
  }

 private:
  Rng rng_;
  double max_step_;
};

// ---------------------------------------------------------------------------
// Default suite.

struct TheoremSuiteConfig {
  std::size_t objectives = 10;
  std::size_t min_dim = 1;
  std::size_t max_dim = 20;
  double eig_lo = 1.0;
  double eig_hi = 10.0;
  std::vector<double> alphas{1.0, 1.5};
  std::size_t deterministic_steps = 200;
  std::size_t pl_points = 1000;
  std::size_t seeds = 20;
  std::vector<std::size_t> checkpoints{100, 1000, 10000};
  double tolerance = 0.5;
  std::uint64_t seed = 2024;
};

struct TheoremReport {
  std::vector<CheckResult> checks;

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }

  const CheckResult& find(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return c;
    throw Error("theorem report: no check named " + name);
  }

  void write_text(std::ostream& os) const {
    for (const auto& c : checks) {
      os << (c.pass ? "PASS " : "FAIL ") << c.name << "  checked=" << c.checked << "  max_violation=" << c.max_violation;
      if (c.first_violation) os << "  first_violation_at=" << *c.first_violation;
      os << '\n';
    }
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "inequality,max_violation,pass\n";
    for (const auto& c : checks) out << c.name << ',' << c.max_violation << ',' << (c.pass ? "pass" : "fail") << '\n';
  }
};

namespace detail {

inline ParamVector random_point(Rng& rng, std::size_t dim, double scale) {
  std::vector<double> v(dim);
  for (double& x : v) x = scale * rng.normal();
  return ParamVector::flat(std::move(v));
}

inline void add_or_merge(std::vector<CheckResult>& checks, const CheckResult& r) {
  for (auto& c : checks) {
    if (c.name == r.name) {
      c.merge(r);
      return;
    }
  }
  checks.push_back(r);
}

}  // namespace detail

/// Random SPD quadratics with dimensions spread over [min_dim, max_dim]
/// (first and last objective take the extremes).
inline std::vector<QuadraticObjective> suite_objectives(const TheoremSuiteConfig& cfg) {
  std::vector<QuadraticObjective> out;
  Rng rng(Rng::derive(cfg.seed, 1));
  for (std::size_t k = 0; k < cfg.objectives; ++k) {
    std::size_t dim = cfg.min_dim + rng.below(cfg.max_dim - cfg.min_dim + 1);
    if (k == 0) dim = cfg.min_dim;
    if (k + 1 == cfg.objectives) dim = cfg.max_dim;
    out.push_back(QuadraticObjective::random(dim, Rng::derive(cfg.seed, 100 + k), cfg.eig_lo, cfg.eig_hi));
  }
  return out;
}

/// Deterministic guard checks (Lyapunov, descent, GD envelope) and PL on
/// every objective.
inline TheoremReport run_deterministic_suite(const TheoremSuiteConfig& cfg) {
  TheoremReport report;
  const auto objectives = suite_objectives(cfg);
  for (std::size_t k = 0; k < objectives.size(); ++k) {
    const auto& f = objectives[k];
    Rng rng(Rng::derive(cfg.seed, 200 + k));
    const ParamVector w0 = detail::random_point(rng, f.dim(), 3.0);

    for (double alpha : cfg.alphas) {
      FunctionRule identity = identity_rule();
      FunctionRule adversarial = shifting_rule(10.0);
      FunctionRule minimizer = minimizer_rule(f);
      RandomRule random(Rng::derive(cfg.seed, 300 + k), 2.0 / f.smoothness());
      for (UpdateRule* rule : std::initializer_list<UpdateRule*>{&identity, &adversarial, &minimizer, &random}) {
        FallbackOptimizer gd(FallbackKind::sgd_nm, LrSchedule::constant_lr(alpha / f.smoothness()));
        const auto trace = lgl2o_deterministic(f, *rule, gd, w0, cfg.deterministic_steps);
        const auto alphas = alphas_from_lrs(trace.lrs, f.smoothness());
        detail::add_or_merge(report.checks, check_lyapunov(trace.points, f));
        const auto [descent, lower] = check_descent_inequality(trace.points, f, alphas);
        detail::add_or_merge(report.checks, descent);
        detail::add_or_merge(report.checks, lower);
        detail::add_or_merge(report.checks, check_gd_convergence(trace.points, f, alpha));
      }
    }

    std::vector<ParamVector> points;
    for (std::size_t i = 0; i < cfg.pl_points; ++i) points.push_back(detail::random_point(rng, f.dim(), 5.0));
    detail::add_or_merge(report.checks, check_pl_condition(f, points));
  }
  return report;
}

/// Seed-averaged stochastic checks on every objective.
inline TheoremReport run_stochastic_suite(const TheoremSuiteConfig& cfg) {
  TheoremReport report;
  const auto objectives = suite_objectives(cfg);
  const std::size_t steps = cfg.checkpoints.empty() ? 0 : *std::max_element(cfg.checkpoints.begin(), cfg.checkpoints.end());
  for (std::size_t k = 0; k < objectives.size(); ++k) {
    const auto& f = objectives[k];
    Rng rng(Rng::derive(cfg.seed, 400 + k));
    const ParamVector w0 = detail::random_point(rng, f.dim(), 3.0);
    const double sigma_g = theorem_noise_level(f, w0);
    const NoisyGradientOracle probe(f, sigma_g, 0);
    const SgdConstants constants = SgdConstants::make(f, probe.sigma2(), f.excess(w0));
    std::vector<SgdRun> runs;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      RandomRule rule(Rng::derive(cfg.seed, 500 + 1000 * k + s), 2.0 / f.smoothness());
      runs.push_back(guarded_sgd_run(f, rule, w0, sigma_g, constants.schedule(), steps, Rng::derive(cfg.seed, 600 + 1000 * k + s)));
    }
    const SgdCheck check = check_sgd_convergence(runs, constants, cfg.checkpoints, cfg.tolerance);
    detail::add_or_merge(report.checks, check.expected_descent);
    detail::add_or_merge(report.checks, check.envelope);
  }
  return report;
}

inline TheoremReport run_theorem_suite(const TheoremSuiteConfig& cfg = {}) {
  TheoremReport report = run_deterministic_suite(cfg);
  for (const auto& c : run_stochastic_suite(cfg).checks) report.checks.push_back(c);
  return report;
}

}  // namespace lgl2o
