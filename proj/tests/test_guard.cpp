// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "lgl2o/guard.hpp"
#include "lgl2o/testbed.hpp"

using namespace lgl2o;

namespace {

FunctionRule nan_rule() {
  return FunctionRule([](const ParamVector& x, const ParamVector&) {
    ParamVector y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::numeric_limits<double>::quiet_NaN();
    return y;
  });
}

FunctionRule throwing_rule() {
  return FunctionRule([](const ParamVector&, const ParamVector&) -> ParamVector { throw DivergenceError("boom"); });
}

FallbackOptimizer sgd(double lr = 0.05) { return FallbackOptimizer(FallbackKind::sgd_nm, LrSchedule::constant_lr(lr)); }

ParamVector start(std::size_t dim, double v = 2.0) { return ParamVector::flat(std::vector<double>(dim, v)); }

struct GuardFixture : ::testing::Test {
  QuadraticObjective f = QuadraticObjective::random(5, 17);
};

}  // namespace

TEST(Choose, StrictWithTiesAndNanToFallback) {
  EXPECT_EQ(choose(1.0, 2.0), Branch::l2o);
  EXPECT_EQ(choose(2.0, 2.0), Branch::fallback);
  EXPECT_EQ(choose(std::numeric_limits<double>::quiet_NaN(), 2.0), Branch::fallback);
  EXPECT_EQ(choose(kInf, 2.0), Branch::fallback);
  EXPECT_EQ(to_string(Branch::l2o), "l2o");
}

TEST_F(GuardFixture, DeterministicPicksTheLowerLoss) {
  auto best = minimizer_rule(f);
  auto fb = sgd();
  const auto trace = lgl2o_deterministic(f, best, fb, start(5), 3);
  ASSERT_EQ(trace.decisions.size(), 3u);
  EXPECT_EQ(trace.decisions[0].chosen, Branch::l2o);
  EXPECT_EQ(trace.points[1], f.minimizer());
  // the lr clock advanced although the fallback never won
  EXPECT_EQ(fb.state().step, 3u);

  auto stay = identity_rule();
  auto fb2 = sgd();
  const auto t2 = lgl2o_deterministic(f, stay, fb2, start(5), 5);
  for (const auto& d : t2.decisions) EXPECT_EQ(d.chosen, Branch::fallback);
}

TEST_F(GuardFixture, DeterministicWithBrokenL2OIsGradientDescent) {
  auto fb_ref = sgd();
  auto x = start(5);
  std::vector<ParamVector> ref{x};
  for (int k = 0; k < 20; ++k) ref.push_back(x = fb_ref.step(x, f.gradient(x)));

  for (auto rule : {nan_rule(), throwing_rule()}) {
    auto fb = sgd();
    const auto trace = lgl2o_deterministic(f, rule, fb, start(5), 20);
    EXPECT_EQ(trace.points, ref);
    for (const auto& d : trace.decisions) EXPECT_EQ(d.l2o_loss, kInf);
  }
}

TEST_F(GuardFixture, DeterministicFallbackDivergenceThrows) {
  auto rule = nan_rule();
  auto fb = sgd(1e300);
  EXPECT_THROW(lgl2o_deterministic(f, rule, fb, start(5), 5), DivergenceError);
}

TEST_F(GuardFixture, CommittedLossIsTheMinimum) {
  NoisyGradientOracle oracle(f, 0.5, 3);
  RandomRule rule(4, 0.3);
  auto fb = sgd(0.02);
  LGL2OConfig cfg;
  cfg.n_t = 3;
  cfg.n_c = 3;
  cfg.total_steps = 600;
  std::size_t blocks = 0;
  BlockObserver<NoisyGradientOracle::Batch> observer = [&](const GuardDecision& d, const ParamVector& x, auto val) {
    double committed = 0.0;
    for (const auto& v : val) committed += oracle.loss(x, v);
    committed /= static_cast<double>(val.size());
    EXPECT_EQ(committed, std::min(d.l2o_loss, d.fallback_loss));
    EXPECT_EQ(committed, d.committed_loss());
    ++blocks;
  };
  const auto run = lgl2o_stochastic(oracle, rule, fb, start(5), cfg, observer);
  EXPECT_TRUE(run.ok());
  EXPECT_EQ(blocks, 200u);
  EXPECT_EQ(run.steps.size(), 600u);
}

TEST_F(GuardFixture, StochasticAlwaysDivergingMatchesFallbackBitwise) {
  NoisyGradientOracle o1(f, 0.3, 9), o2(f, 0.3, 9);
  auto rule = nan_rule();
  FallbackOptimizer fb1(FallbackKind::adam, LrSchedule::power_decay(0.05, 100.0));
  FallbackOptimizer fb2 = fb1;
  LGL2OConfig cfg;
  cfg.total_steps = 95;  // last block is short
  const auto guarded = lgl2o_stochastic(o1, rule, fb1, start(5), cfg);
  const auto plain = fallback_run(o2, fb2, start(5), 95);
  ASSERT_EQ(guarded.steps.size(), plain.steps.size());
  EXPECT_EQ(guarded.final_point, plain.final_point);
  for (std::size_t i = 0; i < plain.steps.size(); ++i) {
    EXPECT_EQ(guarded.steps[i].train_loss, plain.steps[i].train_loss);
    EXPECT_EQ(guarded.steps[i].lr, plain.steps[i].lr);
  }
  EXPECT_EQ(fb1.state(), fb2.state());
  EXPECT_EQ(guarded.decisions.back().n_t, 5u);
}

TEST_F(GuardFixture, L2OWinsAdvanceClockButNotMoments) {
  NoisyGradientOracle oracle(f, 0.0, 1);
  auto best = minimizer_rule(f);
  FallbackOptimizer fb(FallbackKind::adam, LrSchedule::power_decay(0.1, 10.0));
  LGL2OConfig cfg;
  cfg.n_t = 4;
  cfg.total_steps = 8;
  const auto run = lgl2o_stochastic(oracle, best, fb, start(5), cfg);
  EXPECT_EQ(run.decisions[0].chosen, Branch::l2o);
  EXPECT_EQ(fb.state().step, 8u);
  const std::uint64_t fallback_steps = run.decisions[1].chosen == Branch::fallback ? 4u : 0u;
  EXPECT_EQ(fb.state().updates, fallback_steps);
  EXPECT_DOUBLE_EQ(run.steps[5].lr, 0.1 / std::pow(1.5, 1.5));
}

TEST_F(GuardFixture, AdaptiveGrowthOnOverlap) {
  // Both branches sit at w* with exact validation: identical losses overlap
  // every block, so n_t and n_c double up to the cap.
  NoisyGradientOracle oracle(f, 0.0, 1);
  auto stay = identity_rule();
  auto fb = sgd();
  LGL2OConfig cfg;
  cfg.n_t = 2;
  cfg.n_c = 3;
  cfg.adaptive = true;
  cfg.cap = 16;
  cfg.total_steps = 2 + 4 + 8 + 16 + 16;
  const auto run = lgl2o_stochastic(oracle, stay, fb, f.minimizer(), cfg);
  std::vector<std::size_t> n_t, n_c;
  for (const auto& d : run.decisions) {
    n_t.push_back(d.n_t);
    n_c.push_back(d.n_c);
  }
  EXPECT_EQ(n_t, (std::vector<std::size_t>{2, 4, 8, 16, 16}));
  EXPECT_EQ(n_c, (std::vector<std::size_t>{3, 6, 12, 16, 16}));
}

TEST_F(GuardFixture, NoGrowthWithoutOverlapOrWhenDisabled) {
  NoisyGradientOracle oracle(f, 0.0, 1);
  auto best = minimizer_rule(f);
  auto fb = sgd(0.01);
  LGL2OConfig cfg;
  cfg.n_t = 2;
  cfg.adaptive = true;
  cfg.total_steps = 2;
  const auto run = lgl2o_stochastic(oracle, best, fb, start(5), cfg);
  EXPECT_EQ(run.decisions.size(), 1u);
  cfg.adaptive = false;
  cfg.total_steps = 10;
  auto fb2 = sgd(0.01);
  for (const auto& d : lgl2o_stochastic(oracle, best, fb2, f.minimizer(), cfg).decisions) EXPECT_EQ(d.n_t, 2u);
}

TEST_F(GuardFixture, ParallelRolloutsMatchSequential) {
  LGL2OConfig cfg;
  cfg.total_steps = 200;
  auto run_with = [&](bool parallel) {
    NoisyGradientOracle oracle(f, 0.4, 5);
    RandomRule rule(6, 0.2);
    auto fb = sgd(0.03);
    auto c = cfg;
    c.parallel_rollouts = parallel;
    return lgl2o_stochastic(oracle, rule, fb, start(5), c);
  };
  const auto a = run_with(false), b = run_with(true);
  EXPECT_EQ(a.final_point, b.final_point);
  ASSERT_EQ(a.decisions.size(), b.decisions.size());
  for (std::size_t i = 0; i < a.decisions.size(); ++i) EXPECT_EQ(a.decisions[i].chosen, b.decisions[i].chosen);
}

TEST_F(GuardFixture, FallbackDivergenceEndsRunWithFailure) {
  NoisyGradientOracle oracle(f, 0.1, 2);
  auto rule = nan_rule();
  auto fb = sgd(5.0);  // far above 2 / L
  LGL2OConfig cfg;
  cfg.total_steps = 5000;
  const auto run = lgl2o_stochastic(oracle, rule, fb, start(5), cfg);
  EXPECT_FALSE(run.ok());
  EXPECT_LT(run.steps.size(), 5000u);
  EXPECT_EQ(run.counters.steps, run.steps.size());
}

TEST_F(GuardFixture, CountersMatchTheCostModel) {
  NoisyGradientOracle o1(f, 0.2, 1), o2(f, 0.2, 1);
  auto good = FunctionRule([&](const ParamVector& x, const ParamVector& g) {
    ParamVector y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= 0.05 * g[i];
    return y;
  });
  auto fb1 = sgd(0.02);
  LGL2OConfig cfg;
  cfg.total_steps = 500;
  const auto lg = lgl2o_stochastic(o1, good, fb1, start(5), cfg);
  EXPECT_EQ(lg.counters.gradient_calls, 2u * 500u);
  EXPECT_EQ(lg.counters.sequential_gradient_depth, 500u);
  EXPECT_EQ(lg.counters.validation_estimates, 2u * 50u);
  auto fb2 = sgd(0.02);
  GL2OConfig gcfg;
  gcfg.total_steps = 500;
  const auto gl = gl2o_run(o2, good, fb2, start(5), gcfg);
  EXPECT_EQ(gl.counters.gradient_calls, 2u * 500u);
  EXPECT_EQ(gl.counters.sequential_gradient_depth, 2u * 500u);
}

TEST(SafeguardTracker, EmaAndRecentMax) {
  GL2OConfig cfg;
  cfg.theta = 0.5;
  SafeguardTracker ema(cfg);
  ema.start(4.0);
  ema.accept(2.0);
  EXPECT_DOUBLE_EQ(ema.value(), 3.0);
  ema.accept(1.0);
  EXPECT_DOUBLE_EQ(ema.value(), 2.0);

  cfg.sequence = SafeguardSequence::recent_max;
  cfg.m = 2;
  SafeguardTracker rmax(cfg);
  rmax.start(4.0);
  rmax.accept(1.0);
  EXPECT_DOUBLE_EQ(rmax.value(), 4.0);
  rmax.accept(2.0);  // 4 falls out of the window of 2
  EXPECT_DOUBLE_EQ(rmax.value(), 2.0);
}

TEST_F(GuardFixture, Gl2oAcceptsShrinkingStepsAndRejectsBrokenOnes) {
  NoisyGradientOracle o1(f, 0.0, 1), o2(f, 0.0, 1), o3(f, 0.0, 1);
  GL2OConfig cfg;
  cfg.total_steps = 30;
  auto best = minimizer_rule(f);
  auto fb = sgd();
  const auto accepted = gl2o_run(o1, best, fb, start(5), cfg);
  EXPECT_EQ(accepted.decisions.front().chosen, Branch::l2o);
  EXPECT_NEAR(accepted.decisions.front().l2o_loss, 0.0, 1e-12);

  auto broken = nan_rule();
  auto fb_a = sgd(), fb_b = sgd();
  const auto guarded = gl2o_run(o2, broken, fb_a, start(5), cfg);
  const auto plain = fallback_run(o3, fb_b, start(5), 30);
  EXPECT_EQ(guarded.final_point, plain.final_point);
  for (const auto& d : guarded.decisions) EXPECT_EQ(d.chosen, Branch::fallback);
}

TEST(GuardConfig, Validation) {
  LGL2OConfig c;
  c.n_t = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.adaptive = true;
  c.growth = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.cap = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  GL2OConfig g;
  g.alpha = 1.0;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.m = 0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(L2ORun, StopsAtTheFirstDivergence) {
  const auto f = QuadraticObjective::random(3, 1);
  NoisyGradientOracle oracle(f, 0.1, 1);
  int calls = 0;
  FunctionRule rule([&](const ParamVector& x, const ParamVector&) {
    ParamVector y = x;
    if (++calls == 7) y[0] = std::numeric_limits<double>::infinity();
    return y;
  });
  const auto run = l2o_run(oracle, rule, start(3), 100);
  EXPECT_FALSE(run.ok());
  EXPECT_EQ(run.steps.size(), 7u);
}
