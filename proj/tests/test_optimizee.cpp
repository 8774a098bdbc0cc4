// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "lgl2o/optimizee.hpp"

using namespace lgl2o;

namespace {

ParamVector alternating_params(const Optimizee& net) {
  ParamVector p(net.layout());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.1 * static_cast<double>(i + 1) * (i % 2 == 0 ? 1.0 : -1.0);
  return p;
}

MiniBatch tiny_batch() {
  MiniBatch b;
  b.features = ad::Tensor({3, 2}, {0.5, -1.0, 2.0, 0.25, -0.3, 0.7});
  b.labels = {1, 0, 1};
  return b;
}

}  // namespace

// Expected values from a float64 PyTorch run of the same 2-3-2 sigmoid MLP
// (cross_entropy with mean reduction).
TEST(Optimizee, MlpLossAndGradientMatchReference) {
  Optimizee net(MlpSpec{2, {3}, 2, Activation::sigmoid});
  ASSERT_EQ(net.num_params(), 17u);
  const auto p = alternating_params(net);
  const auto lg = net.loss_and_grad(p, tiny_batch());
  EXPECT_NEAR(lg.loss, 2.5631987312080438, 1e-13);
  const std::vector<double> expected{
      0.29934523871154656,  0.31604779647588715, 0.31595296162080183,  0.03738788792019405,  0.039461441974274106,
      0.0394327816144118,   0.1495021671499505,  0.15782697932582565,  0.1577548883707037,   -0.22964930746645437,
      0.22964930746645443,  -0.08466083757561234, 0.08466083757561237, -0.2643411884821816,  0.26434118848218163,
      -0.33282000687636787, 0.3328200068763679};
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(lg.grad[i], expected[i], 1e-13) << i;
  EXPECT_DOUBLE_EQ(net.loss(p, tiny_batch()), lg.loss);
}

// Same oracle for a one-layer relu CNN on 5x5 inputs, stride 2, flattened
// channel-major into a linear layer.
TEST(Optimizee, CnnLossAndGradientMatchReference) {
  CnnSpec spec;
  spec.in_channels = 1;
  spec.height = spec.width = 5;
  spec.channels = {2};
  spec.kernels = {3};
  spec.strides = {2};
  spec.classes = 3;
  Optimizee net(spec);
  ASSERT_EQ(net.num_params(), 47u);
  ParamVector p(net.layout());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.5 * std::sin(0.7 * static_cast<double>(i) + 0.3);
  MiniBatch b;
  std::vector<double> x(50);
  for (std::size_t i = 0; i < 25; ++i) {
    x[i] = std::cos(0.37 * static_cast<double>(i));
    x[25 + i] = std::sin(0.11 * static_cast<double>(i * i));
  }
  b.features = ad::Tensor({2, 1, 5, 5}, x);
  b.labels = {2, 0};
  const auto lg = net.loss_and_grad(p, b);
  EXPECT_NEAR(lg.loss, 1.4240971651541878, 1e-12);
  const std::vector<double> expected{
      -0.06412158808429128, 0.2463397229644687,   0.0737486908643015,  0.03070856267405303,  0.11421642711646199,
      0.10085628927666192,  -0.05843559682786226, -0.45122484360024506, -0.1560409319455655, 0.08307808434583479,
      -0.011133855693516409, 0.17374518883831094, 0.05960088074027056, 0.329231553762529,    0.256728546946018,
      0.05478550789365558,  0.014037765284144334, -0.04131775633497804, 0.3584723263703175,  -0.1580906459943596,
      0.12716725750348293,  0.4355406132104704,   -0.5627078707139535, -0.15538017995765402, 0.1953576599948347,
      -0.03997748003718075, -0.14481361896401845, 0.06438429304598386, 0.08042932591803456,  0.27269760997568887,
      0.15277366382514748,  -0.42547127380083644, 0.09686589404033867, 0.521165037053785,    -0.6180309310941238,
      -0.1798733767038809,  0.2813066621764131,   -0.10143328547253229, -0.23928214127724842, 0.10638510117265128,
      0.1328970401045971,   0.33184700771538406,  0.18591099204210448, -0.5177579997574886,  -0.11654384987524469,
      0.3036103014468935,   -0.18706645157164892};
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(lg.grad[i], expected[i], 1e-12) << i;
}

TEST(Optimizee, DefaultCnnFitsMnist) {
  Optimizee net(CnnSpec{});
  const auto blocks = net.layout()->blocks();
  // 28 -> 12 -> 5 -> 2 with kernels 5,3,3 and stride 2
  EXPECT_EQ(blocks[blocks.size() - 2].shape, (ad::Shape{32 * 2 * 2, 10}));
  EXPECT_EQ(net.input_shape(), (ad::Shape{1, 28, 28}));
}

TEST(Optimizee, RejectsBadArchitecturesAndBatches) {
  EXPECT_THROW(Optimizee(MlpSpec{2, {0}, 2}), ShapeError);
  EXPECT_THROW(Optimizee(MlpSpec{2, {4}, 1}), ShapeError);
  CnnSpec too_big;
  too_big.height = too_big.width = 4;
  EXPECT_THROW(Optimizee{too_big}, ShapeError);

  Optimizee net(MlpSpec{});
  auto b = tiny_batch();
  EXPECT_THROW(net.loss(ParamVector::flat({1.0, 2.0}), b), ShapeError);
  b.features = ad::Tensor({3, 3}, std::vector<double>(9, 0.0));
  EXPECT_THROW(net.loss(net.init_params(0), b), ShapeError);
}

TEST(Optimizee, FrozenBlocksGetNoGradient) {
  Optimizee net(MlpSpec{2, {3}, 2});
  const std::vector<std::string> frozen{"hidden0.weight"};
  const auto g = net.grad_loss(alternating_params(net), tiny_batch(), frozen);
  const auto& w = net.layout()->find("hidden0.weight");
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(g[w.offset + i], 0.0);
  EXPECT_NE(g[net.layout()->find("out.bias").offset], 0.0);
}

TEST(Optimizee, InitIsSeededAndWithinFanInBounds) {
  Optimizee net(MlpSpec{});
  const auto a = net.init_params(3), b = net.init_params(3), c = net.init_params(4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (const auto& blk : net.layout()->blocks()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(blk.fan_in));
    for (std::size_t i = 0; i < blk.size(); ++i) EXPECT_LE(std::abs(a[blk.offset + i]), bound);
  }
}

TEST(Optimizee, CountsEvaluations) {
  Optimizee net(MlpSpec{2, {3}, 2});
  const auto p = alternating_params(net);
  net.counters().reset();
  net.loss(p, tiny_batch());
  net.loss_and_grad(p, tiny_batch());
  net.loss_and_grad(p, tiny_batch());
  EXPECT_EQ(net.counters().losses.load(), 1u);
  EXPECT_EQ(net.counters().gradients.load(), 2u);
}

TEST(ParamVector, FlattenUnflattenRoundTrip) {
  Optimizee net(MlpSpec{});
  const auto p = net.init_params(9);
  const auto tensors = p.unflatten();
  ASSERT_EQ(tensors.size(), net.layout()->blocks().size());
  EXPECT_EQ(ParamVector::flatten(net.layout(), tensors), p);
  auto bad = tensors;
  bad[0] = ad::Tensor::zeros({1});
  EXPECT_THROW(ParamVector::flatten(net.layout(), bad), ShapeError);
}
