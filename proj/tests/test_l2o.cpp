// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "lgl2o/data.hpp"
#include "lgl2o/l2o.hpp"
#include "lgl2o/meta_train.hpp"

using namespace lgl2o;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

L2OWeights small_weights(std::uint64_t seed, std::size_t hidden = 4, std::size_t layers = 2) {
  L2OConfig cfg;
  cfg.hidden = hidden;
  cfg.layers = layers;
  return L2OWeights::random(cfg, seed);
}

void zero_block(L2OWeights& w, const std::string& name) {
  const auto& b = w.zeta.layout()->find(name);
  for (std::size_t i = 0; i < b.size(); ++i) w.zeta[b.offset + i] = 0.0;
}

}  // namespace

TEST(Preprocessor, BothBranches) {
  const Preprocessor pre{10.0};
  auto [a, b] = pre(1.0);
  EXPECT_DOUBLE_EQ(a, 0.0);
  EXPECT_DOUBLE_EQ(b, 1.0);
  std::tie(a, b) = pre(-std::exp(-5.0));
  EXPECT_NEAR(a, -0.5, 1e-15);
  EXPECT_DOUBLE_EQ(b, -1.0);
  std::tie(a, b) = pre(1e-6);
  EXPECT_DOUBLE_EQ(a, -1.0);
  EXPECT_NEAR(b, std::exp(10.0) * 1e-6, 1e-15);
  std::tie(a, b) = pre(0.0);
  EXPECT_DOUBLE_EQ(a, -1.0);
  EXPECT_DOUBLE_EQ(b, 0.0);
}

TEST(Preprocessor, ContinuousAtTheThreshold) {
  const Preprocessor pre{10.0};
  const double t = std::exp(-10.0);
  for (double sign : {1.0, -1.0}) {
    const auto above = pre(sign * t * (1.0 + 1e-12));
    const auto below = pre(sign * t * (1.0 - 1e-12));
    EXPECT_NEAR(above.first, below.first, 1e-9);
    EXPECT_NEAR(above.second, below.second, 1e-9);
  }
}

// One layer, hidden size 1, one coordinate: the update written out by hand.
TEST(L2O, SingleCellMatchesHandWrittenLstm) {
  L2OConfig cfg;
  cfg.hidden = 1;
  cfg.layers = 1;
  cfg.output_scale = 0.5;
  L2OWeights w = L2OWeights::random(cfg, 0);
  // w_in [2,4], w_hidden [1,4], bias [4], head.weight [1,1], head.bias [1]
  const std::vector<double> zeta{0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8,  // w_in
                                 0.9, -1.0, 1.1, -1.2,                       // w_hidden
                                 0.05, 0.1, -0.15, 0.2,                      // bias
                                 1.3, -0.25};                                // head
  ASSERT_EQ(w.zeta.size(), zeta.size());
  for (std::size_t i = 0; i < zeta.size(); ++i) w.zeta[i] = zeta[i];

  L2OOptimizer opt(w);
  const double g = 0.3, x = 2.0;
  const double u0 = std::log(g) / 10.0, u1 = 1.0;
  double h = 0.0, c = 0.0;
  auto step = [&](double in0, double in1) {
    double pre[4];
    for (int k = 0; k < 4; ++k) pre[k] = in0 * zeta[k] + in1 * zeta[4 + k] + h * zeta[8 + k] + zeta[12 + k];
    c = sig(pre[1]) * c + sig(pre[0]) * std::tanh(pre[2]);
    h = sig(pre[3]) * std::tanh(c);
    return 0.5 * (h * zeta[16] + zeta[17]);
  };
  const double d1 = step(u0, u1);
  const auto y1 = opt.propose(ParamVector::flat({x}), ParamVector::flat({g}));
  EXPECT_NEAR(y1[0], x + d1, 1e-15);
  // the hidden state carries over to the next call
  const double d2 = step(u0, u1);
  const auto y2 = opt.propose(y1, ParamVector::flat({g}));
  EXPECT_NEAR(y2[0], y1[0] + d2, 1e-15);
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(L2O, ZeroHeadIsIdentity) {
  auto w = small_weights(3);
  zero_block(w, "head.weight");
  zero_block(w, "head.bias");
  L2OOptimizer opt(w);
  const auto x = ParamVector::flat({1.0, -2.0, 3.5});
  EXPECT_EQ(opt.propose(x, ParamVector::flat({0.4, -7.0, 1e-9})), x);
}

TEST(L2O, CoordinatewiseAndPermutationEquivariant) {
  const auto w = small_weights(5);
  const std::vector<double> g{0.5, -1e-3, 2.0, -0.07};
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<double> gp(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) gp[i] = g[perm[i]];

  L2OOptimizer a(w), b(w);
  const auto zero = ParamVector::flat(std::vector<double>(g.size(), 0.0));
  for (int t = 0; t < 3; ++t) {
    const auto ya = a.propose(zero, ParamVector::flat(g));
    const auto yb = b.propose(zero, ParamVector::flat(gp));
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(yb[i], ya[perm[i]]);
  }
}

TEST(L2O, NonFiniteProposalThrowsAndKeepsState) {
  auto w = small_weights(1);
  L2OOptimizer opt(w);
  const auto x = ParamVector::flat({1.0, 2.0});
  opt.propose(x, ParamVector::flat({0.1, 0.2}));
  const LstmState before = opt.state();
  auto bad = x;
  bad[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.propose(bad, ParamVector::flat({0.1, 0.2})), DivergenceError);
  EXPECT_EQ(opt.steps(), 1u);
  for (std::size_t l = 0; l < before.h.size(); ++l) EXPECT_EQ(opt.state().h[l].values(), before.h[l].values());
  EXPECT_THROW(opt.propose(ParamVector::flat({1.0}), ParamVector::flat({0.1})), ShapeError);
}

TEST(WeightFile, RoundTripsBitExactly) {
  const auto w = small_weights(11, 6, 2);
  const auto path = std::filesystem::temp_directory_path() / "lgl2o_weights_test.l2o";
  save_weights(w, path);
  const auto back = load_weights(path);
  EXPECT_EQ(back, w);
  std::filesystem::remove(path);
}

TEST(WeightFile, RejectsCorruption) {
  const auto bytes = serialize_weights(small_weights(2));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_weights(bad_magic), ParseError);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize_weights(bad_version), ParseError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_weights(truncated), ParseError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_weights(trailing), ParseError);
  EXPECT_THROW(load_weights("/nonexistent/weights.l2o"), ParseError);
}

namespace {

struct MetaFixture : ::testing::Test {
  Optimizee net{MlpSpec{2, {5}, 2}};
  std::shared_ptr<const Dataset> data = std::make_shared<const Dataset>(gen_moons(512, 0.1, 1));
};

}  // namespace

// Central differences through a whole 5-step unrolled window. The LSTM inputs
// are frozen so the meta-loss is a plain function of the meta-parameters.
TEST_F(MetaFixture, MetaGradientMatchesFiniteDifferences) {
  auto w = small_weights(4, 3, 2);
  w.config.output_scale = 0.1;
  const auto theta0 = net.init_params(2);
  const auto state0 = LstmState::zeros(w.config, theta0.size());
  BatchSampler sampler(data, 3, 32);
  const auto batches = sampler.sample(6);
  const auto probe = run_window(net, w, theta0, state0, batches, false);
  const auto exact = run_window(net, w, theta0, state0, batches, true, &probe.inputs);
  ASSERT_EQ(exact.zeta_grad.size(), w.zeta.size());

  const double h = 1e-6;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < w.zeta.size(); ++i) {
    auto up = w, down = w;
    up.zeta[i] += h;
    down.zeta[i] -= h;
    const double numeric = (run_window(net, up, theta0, state0, batches, false, &probe.inputs).meta_loss -
                            run_window(net, down, theta0, state0, batches, false, &probe.inputs).meta_loss) /
                           (2.0 * h);
    diff2 += (numeric - exact.zeta_grad[i]) * (numeric - exact.zeta_grad[i]);
    a2 += exact.zeta_grad[i] * exact.zeta_grad[i];
    n2 += numeric * numeric;
  }
  EXPECT_GT(std::sqrt(a2), 1e-6);
  EXPECT_LT(std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2)), 1e-3);
}

TEST_F(MetaFixture, WindowAgreesWithStepwiseOptimizer) {
  const auto w = small_weights(6, 4, 2);
  const auto theta0 = net.init_params(1);
  BatchSampler sampler(data, 8, 32);
  const auto batches = sampler.sample(4);
  const auto r = run_window(net, w, theta0, LstmState::zeros(w.config, theta0.size()), batches, false);

  L2OOptimizer opt(w);
  auto theta = theta0;
  double meta = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    theta = opt.propose(theta, net.grad_loss(theta, batches[t]));
    meta += net.loss(theta, batches[t + 1]);
  }
  EXPECT_NEAR(r.meta_loss, meta, 1e-12);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_NEAR(r.theta_end[i], theta[i], 1e-12);
}

TEST_F(MetaFixture, RejectsBadConfigs) {
  MetaTrainConfig cfg;
  cfg.rollout = 30;
  cfg.truncation = 20;
  EXPECT_THROW(MetaTrainer(net, data, cfg), ConfigError);
  cfg.rollout = 40;
  cfg.meta_lr = 0.0;
  EXPECT_THROW(MetaTrainer(net, data, cfg), ConfigError);
}

TEST_F(MetaFixture, ShortTrainingIsSeededAndLogged) {
  MetaTrainConfig cfg;
  cfg.l2o.hidden = 4;
  cfg.meta_steps = 6;
  cfg.rollout = 6;
  cfg.truncation = 3;
  cfg.batch_size = 32;
  const auto a = MetaTrainer(net, data, cfg).train();
  const auto b = MetaTrainer(net, data, cfg).train();
  EXPECT_EQ(a.weights, b.weights);
  ASSERT_EQ(a.log.size(), 6u);
  // two windows per rollout
  EXPECT_EQ(a.log[1].window, 1u);
  EXPECT_EQ(a.log[2].window, 0u);
  EXPECT_EQ(a.log[2].rollout, 1u);
  EXPECT_NE(a.weights, L2OWeights::random(cfg.l2o, Rng::derive(cfg.seed, 1)));
}

// 500 meta-steps on Moons with the default architecture; the trained
// optimizer must beat its own random initialisation on held-out optimizee
// inits in at least 4 of 5 cases (mean training loss over 100 steps).
TEST(MetaTraining, TrainedBeatsRandomInit) {
  Optimizee net(MlpSpec{});
  auto data = std::make_shared<const Dataset>(gen_moons(2000, 0.1, 1));
  MetaTrainConfig cfg;
  cfg.meta_steps = 500;
  const auto trained = MetaTrainer(net, data, cfg).train();
  const auto random = L2OWeights::random(cfg.l2o, Rng::derive(cfg.seed, 1));
  auto mean_loss = [&](const L2OWeights& w, std::uint64_t seed) {
    BatchSampler sampler(data, 900 + seed);
    const auto losses = l2o_rollout_losses(net, w, net.init_params(900 + seed), sampler, 100);
    if (losses.size() < 100) return std::numeric_limits<double>::infinity();
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
  };
  int wins = 0;
  for (std::uint64_t s = 0; s < 5; ++s) wins += mean_loss(trained.weights, s) < mean_loss(random, s) ? 1 : 0;
  EXPECT_GE(wins, 4);
}
