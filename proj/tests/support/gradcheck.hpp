// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference checks for the autodiff ops. Each op is reduced
// to a scalar by a fixed random projection, sum(op(x) * R), so one case
// exercises the whole vector-Jacobian product rather than a single output.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lgl2o/autodiff.hpp"
#include "lgl2o/rng.hpp"

namespace lgl2o::testing {

struct OpCase {
  std::string name;
  /// Draws the inputs of one random case.
  std::function<std::vector<ad::Tensor>(Rng&)> inputs;
  /// Applies the op. Inputs arrive as Vars on one tape.
  std::function<ad::Var(const std::vector<ad::Var>&)> apply;
  /// The last `constants` inputs are parameters, not differentiated.
  std::size_t constants = 0;
};

inline ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Like random_tensor but keeps every entry at least `gap` away from 0, so
/// a kinked op (relu) is differentiable inside the finite-difference stencil.
inline ad::Tensor random_away_from_zero(Rng& rng, ad::Shape shape, double gap = 0.05) {
  ad::Tensor t = random_tensor(rng, std::move(shape), gap, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (rng.uniform() < 0.5) t[i] = -t[i];
  return t;
}

inline std::size_t dim_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

struct GradCheck {
  double rel_error = 0.0;
  double analytic_norm = 0.0;
};

/// ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-8)
/// over all inputs of one case.
inline GradCheck gradcheck(const OpCase& op, const std::vector<ad::Tensor>& inputs, Rng& rng, double h = 1e-6) {
  ad::Tensor projection;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    projection = random_tensor(rng, op.apply(vars).shape());
  }
  auto objective = [&](const std::vector<ad::Tensor>& xs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    return ad::sum(ad::mul(op.apply(vars), tape.constant(projection))).value().item();
  };

  const std::size_t wrt = inputs.size() - op.constants;
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (std::size_t k = 0; k < inputs.size(); ++k) leaves.push_back(tape.leaf(inputs[k], k < wrt));
  tape.backward(ad::sum(ad::mul(op.apply(leaves), tape.constant(projection))));

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::vector<ad::Tensor> probe = inputs;
  for (std::size_t k = 0; k < wrt; ++k) {
    const ad::Tensor analytic = leaves[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      probe[k][i] = inputs[k][i] + h;
      const double up = objective(probe);
      probe[k][i] = inputs[k][i] - h;
      const double down = objective(probe);
      probe[k][i] = inputs[k][i];
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double denom = std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
  return {std::sqrt(diff2) / denom, std::sqrt(a2)};
}

/// Every differentiable op of the engine, with a random-shape generator.
inline std::vector<OpCase> op_catalogue() {
  using ad::Tensor;
  using ad::Var;
  std::vector<OpCase> ops;

  ops.push_back({"matmul",
                 [](Rng& r) {
                   const auto m = dim_between(r, 1, 5), k = dim_between(r, 1, 5), n = dim_between(r, 1, 5);
                   return std::vector<Tensor>{random_tensor(r, {m, k}), random_tensor(r, {k, n})};
                 },
                 [](const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }});

  ops.push_back({"conv2d",
                 [](Rng& r) {
                   const auto n = dim_between(r, 1, 2), c = dim_between(r, 1, 2), o = dim_between(r, 1, 3);
                   const auto k = dim_between(r, 1, 3), h = dim_between(r, k, 6), w = dim_between(r, k, 6);
                   return std::vector<Tensor>{random_tensor(r, {n, c, h, w}), random_tensor(r, {o, c, k, k})};
                 },
                 [](const std::vector<Var>& v) {
                   // stride and padding follow from the input sizes so each
                   // case sees one fixed configuration
                   const std::size_t stride = 1 + v[0].shape()[2] % 2;
                   const std::size_t padding = v[0].shape()[3] % 2;
                   return ad::conv2d(v[0], v[1], {stride, padding});
                 }});

  ops.push_back({"add",
                 [](Rng& r) {
                   const auto rows = dim_between(r, 1, 4), cols = dim_between(r, 1, 4);
                   switch (r.below(3)) {
                     case 0: return std::vector<Tensor>{random_tensor(r, {rows, cols}), random_tensor(r, {rows, cols})};
                     case 1: return std::vector<Tensor>{random_tensor(r, {rows, cols}), random_tensor(r, {cols})};
                     default: {
                       const auto h = dim_between(r, 1, 3);
                       return std::vector<Tensor>{random_tensor(r, {rows, cols, h, 2}), random_tensor(r, {cols})};
                     }
                   }
                 },
                 [](const std::vector<Var>& v) { return ad::add(v[0], v[1]); }});

  ops.push_back({"sub",
                 [](Rng& r) {
                   const ad::Shape s{dim_between(r, 1, 4), dim_between(r, 1, 4)};
                   return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)};
                 },
                 [](const std::vector<Var>& v) { return ad::sub(v[0], v[1]); }});

  ops.push_back({"mul",
                 [](Rng& r) {
                   const ad::Shape s{dim_between(r, 1, 4), dim_between(r, 1, 4)};
                   return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)};
                 },
                 [](const std::vector<Var>& v) { return ad::mul(v[0], v[1]); }});

  ops.push_back({"scale",
                 [](Rng& r) {
                   return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 4), dim_between(r, 1, 4)}),
                                              Tensor::scalar(r.uniform(-3.0, 3.0))};
                 },
                 [](const std::vector<Var>& v) { return ad::scale(v[0], v[1].value().item()); }, 1});

  ops.push_back({"sigmoid", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 6), 3}, -4.0, 4.0)}; },
                 [](const std::vector<Var>& v) { return ad::sigmoid(v[0]); }});

  ops.push_back({"tanh", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 6), 3}, -3.0, 3.0)}; },
                 [](const std::vector<Var>& v) { return ad::tanh(v[0]); }});

  ops.push_back({"relu", [](Rng& r) { return std::vector<Tensor>{random_away_from_zero(r, {dim_between(r, 1, 6), 3})}; },
                 [](const std::vector<Var>& v) { return ad::relu(v[0]); }});

  ops.push_back({"log_softmax",
                 [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 5), dim_between(r, 2, 6)}, -5.0, 5.0)}; },
                 [](const std::vector<Var>& v) { return ad::log_softmax(v[0]); }});

  ops.push_back({"nll_loss",
                 [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 6), dim_between(r, 2, 5)}, -3.0, 0.0)}; },
                 [](const std::vector<Var>& v) {
                   const auto& s = v[0].shape();
                   std::vector<int> labels(s[0]);
                   for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((3 * i + 1) % s[1]);
                   return ad::nll_loss(v[0], labels);
                 }});

  ops.push_back({"concat",
                 [](Rng& r) {
                   const auto rows = dim_between(r, 1, 4);
                   return std::vector<Tensor>{random_tensor(r, {rows, dim_between(r, 1, 3)}),
                                              random_tensor(r, {rows, dim_between(r, 1, 3)}),
                                              random_tensor(r, {rows, dim_between(r, 1, 3)})};
                 },
                 [](const std::vector<Var>& v) { return ad::concat(v, 1); }});

  ops.push_back({"slice",
                 [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 2, 6), dim_between(r, 1, 4)})}; },
                 [](const std::vector<Var>& v) {
                   const std::size_t rows = v[0].shape()[0];
                   return ad::slice(v[0], 0, rows / 3, rows - rows / 4);
                 }});

  ops.push_back({"reshape",
                 [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 4), dim_between(r, 1, 4), 2})}; },
                 [](const std::vector<Var>& v) {
                   const auto& s = v[0].shape();
                   return ad::reshape(v[0], {s[0] * s[1], 2});
                 }});

  ops.push_back({"sum", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {dim_between(r, 1, 5), dim_between(r, 1, 5)})}; },
                 [](const std::vector<Var>& v) { return ad::sum(v[0]); }});

  return ops;
}

}  // namespace lgl2o::testing
