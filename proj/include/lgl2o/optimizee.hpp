// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lgl2o/autodiff.hpp"
#include "lgl2o/error.hpp"
#include "lgl2o/rng.hpp"

namespace lgl2o {

/// One named parameter tensor inside a flat vector.
struct ParamBlock {
  std::string name;
  ad::Shape shape;
  std::size_t offset = 0;
  std::size_t fan_in = 1;

  std::size_t size() const { return ad::numel(shape); }

  friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

/// Offsets and shapes of the parameter tensors of a model, in flattening order.
class ParamLayout {
 public:
  ParamLayout() = default;

  void add(std::string name, ad::Shape shape, std::size_t fan_in) {
    ParamBlock block{std::move(name), std::move(shape), total_, fan_in};
    total_ += block.size();
    blocks_.push_back(std::move(block));
  }

  std::span<const ParamBlock> blocks() const noexcept { return blocks_; }
  std::size_t total() const noexcept { return total_; }

  const ParamBlock& find(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw Error("layout: no parameter named '" + name + "'");
  }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

/// Flat parameter vector with a shared layout map back to the layer tensors.
/// This is the iterate every optimizer in the library proposes updates to.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), values_(layout_->total(), 0.0) {}

  ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total()) {
      throw ShapeError("param vector: " + std::to_string(values_.size()) + " values for a layout of " +
                       std::to_string(layout_->total()));
    }
  }

  /// Single-block vector, for objectives that are not neural networks.
  static ParamVector flat(std::vector<double> values) {
    auto layout = std::make_shared<ParamLayout>();
    layout->add("w", {values.size()}, values.size());
    return ParamVector(std::move(layout), std::move(values));
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::shared_ptr<const ParamLayout>& layout() const noexcept { return layout_; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& raw() const noexcept { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool same_layout(const ParamVector& other) const {
    if (layout_ == other.layout_) return true;
    return layout_ && other.layout_ && *layout_ == *other.layout_;
  }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
  }

  /// Splits into one tensor per layout block.
  std::vector<ad::Tensor> unflatten() const {
    std::vector<ad::Tensor> out;
    for (const auto& b : layout_->blocks()) {
      auto first = values_.begin() + static_cast<std::ptrdiff_t>(b.offset);
      out.emplace_back(b.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(b.size())));
    }
    return out;
  }

  static ParamVector flatten(std::shared_ptr<const ParamLayout> layout, const std::vector<ad::Tensor>& tensors) {
    if (tensors.size() != layout->blocks().size()) throw ShapeError("flatten: tensor count does not match layout");
    std::vector<double> values;
    values.reserve(layout->total());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].shape() != layout->blocks()[i].shape) {
        throw ShapeError("flatten: block '" + layout->blocks()[i].name + "' expects " +
                         ad::to_string(layout->blocks()[i].shape) + ", got " + ad::to_string(tensors[i].shape()));
      }
      values.insert(values.end(), tensors[i].values().begin(), tensors[i].values().end());
    }
    return ParamVector(std::move(layout), std::move(values));
  }

  ad::Tensor as_tensor() const { return ad::Tensor::vector(values_); }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

/// Fills each block with Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws, the
/// default initialisation of linear, convolutional and recurrent layers in
/// common deep-learning frameworks.
inline ParamVector init_fan_in_uniform(std::shared_ptr<const ParamLayout> layout, std::uint64_t seed) {
  Rng rng(seed);
  ParamVector p(layout);
  for (const auto& b : layout->blocks()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
    for (std::size_t i = 0; i < b.size(); ++i) p[b.offset + i] = rng.uniform(-bound, bound);
  }
  return p;
}

enum class Activation { sigmoid, relu, tanh };

inline ad::Var activate(Activation act, ad::Var x) {
  switch (act) {
    case Activation::sigmoid: return ad::sigmoid(x);
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
  }
  return x;
}

/// Fully connected net: inputs -> hidden... -> classes, log-softmax output.
struct MlpSpec {
  std::size_t inputs = 2;
  std::vector<std::size_t> hidden{20};
  std::size_t classes = 2;
  Activation activation = Activation::sigmoid;
};

/// Unpadded conv stack followed by one fully connected output layer.
struct CnnSpec {
  std::size_t in_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::vector<std::size_t> channels{8, 16, 32};
  std::vector<std::size_t> kernels{5, 3, 3};
  std::vector<std::size_t> strides{2, 2, 2};
  std::size_t padding = 0;
  std::size_t classes = 10;
  Activation activation = Activation::relu;
};

using ArchSpec = std::variant<MlpSpec, CnnSpec>;

/// A labelled mini-batch. Features are [size, feature...] row-major.
struct MiniBatch {
  ad::Tensor features;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // dataset rows, when drawn by a sampler

  std::size_t size() const noexcept { return labels.size(); }
};

/// Cumulative evaluation counts; atomic because the guard may run its two
/// rollouts on separate threads against the same optimizee.
struct EvalCounters {
  std::atomic<std::uint64_t> gradients{0};
  std::atomic<std::uint64_t> losses{0};

  void reset() {
    gradients = 0;
    losses = 0;
  }
};

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// A network being optimized, together with its NLL loss.
class Optimizee {
 public:
  explicit Optimizee(ArchSpec spec) : spec_(std::move(spec)), layout_(build_layout(spec_)) {}

  Optimizee(const Optimizee& other) : spec_(other.spec_), layout_(other.layout_) {}
  Optimizee& operator=(const Optimizee& other) {
    spec_ = other.spec_;
    layout_ = other.layout_;
    return *this;
  }

  const ArchSpec& spec() const noexcept { return spec_; }
  const std::shared_ptr<const ParamLayout>& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_->total(); }
  EvalCounters& counters() const noexcept { return counters_; }

  /// Extents of one input example.
  ad::Shape input_shape() const {
    if (const auto* mlp = std::get_if<MlpSpec>(&spec_)) return {mlp->inputs};
    const auto& cnn = std::get<CnnSpec>(spec_);
    return {cnn.in_channels, cnn.height, cnn.width};
  }

  /// Records the mean NLL of `batch` under parameters `theta` (a flat [n]
  /// Var) on theta's tape. Blocks named in `frozen` are detached.
  ad::Var forward_loss(ad::Var theta, const MiniBatch& batch, std::span<const std::string> frozen = {}) const {
    ad::Tape& tape = theta.tape();
    if (theta.shape() != ad::Shape{num_params()}) {
      throw ShapeError("optimizee: parameter var has shape " + ad::to_string(theta.shape()) + ", expected [" +
                       std::to_string(num_params()) + "]");
    }
    check_batch(batch);
    auto param = [&](std::size_t index) {
      const ParamBlock& b = layout_->blocks()[index];
      ad::Var v = ad::reshape(ad::slice(theta, 0, b.offset, b.offset + b.size()), b.shape);
      for (const auto& name : frozen)
        if (name == b.name) return ad::detach(v);
      return v;
    };

    ad::Var x = tape.constant(batch.features);
    std::size_t next = 0;
    if (const auto* mlp = std::get_if<MlpSpec>(&spec_)) {
      x = ad::reshape(x, {batch.size(), mlp->inputs});
      for (std::size_t l = 0; l < mlp->hidden.size(); ++l) {
        ad::Var w = param(next++);
        ad::Var b = param(next++);
        x = activate(mlp->activation, ad::add(ad::matmul(x, w), b));
      }
    } else {
      const auto& cnn = std::get<CnnSpec>(spec_);
      x = ad::reshape(x, {batch.size(), cnn.in_channels, cnn.height, cnn.width});
      for (std::size_t l = 0; l < cnn.channels.size(); ++l) {
        ad::Var k = param(next++);
        ad::Var b = param(next++);
        x = ad::conv2d(x, k, {cnn.strides[l], cnn.padding});
        x = activate(cnn.activation, ad::add(x, b));
      }
      const std::size_t flat = ad::numel(x.shape()) / batch.size();
      x = ad::reshape(x, {batch.size(), flat});
    }
    ad::Var w = param(next++);
    ad::Var b = param(next++);
    ad::Var logits = ad::add(ad::matmul(x, w), b);
    return ad::nll_loss(ad::log_softmax(logits), batch.labels);
  }

  double loss(const ParamVector& params, const MiniBatch& batch) const {
    check_params(params);
    ++counters_.losses;
    ad::Tape tape;
    return forward_loss(tape.constant(params.as_tensor()), batch).value().item();
  }

  LossAndGrad loss_and_grad(const ParamVector& params, const MiniBatch& batch,
                            std::span<const std::string> frozen = {}) const {
    check_params(params);
    ++counters_.gradients;
    ad::Tape tape;
    ad::Var theta = tape.leaf(params.as_tensor());
    ad::Var loss = forward_loss(theta, batch, frozen);
    tape.backward(loss);
    return {loss.value().item(), ParamVector(layout_, std::move(theta.grad().values()))};
  }

  ParamVector grad_loss(const ParamVector& params, const MiniBatch& batch,
                        std::span<const std::string> frozen = {}) const {
    return loss_and_grad(params, batch, frozen).grad;
  }

  /// Every entry ~ Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) of its layer,
  /// weights and biases alike.
  ParamVector init_params(std::uint64_t seed) const { return init_fan_in_uniform(layout_, seed); }

 private:
  static std::shared_ptr<const ParamLayout> build_layout(const ArchSpec& spec) {
    auto layout = std::make_shared<ParamLayout>();
    if (const auto* mlp = std::get_if<MlpSpec>(&spec)) {
      if (mlp->inputs == 0 || mlp->classes < 2) throw ShapeError("mlp: needs inputs > 0 and at least 2 classes");
      std::size_t prev = mlp->inputs;
      for (std::size_t l = 0; l < mlp->hidden.size(); ++l) {
        if (mlp->hidden[l] == 0) throw ShapeError("mlp: empty hidden layer");
        layout->add("hidden" + std::to_string(l) + ".weight", {prev, mlp->hidden[l]}, prev);
        layout->add("hidden" + std::to_string(l) + ".bias", {mlp->hidden[l]}, prev);
        prev = mlp->hidden[l];
      }
      layout->add("out.weight", {prev, mlp->classes}, prev);
      layout->add("out.bias", {mlp->classes}, prev);
      return layout;
    }
    const auto& cnn = std::get<CnnSpec>(spec);
    if (cnn.channels.size() != cnn.kernels.size() || cnn.channels.size() != cnn.strides.size()) {
      throw ShapeError("cnn: channels, kernels and strides must have equal length");
    }
    std::size_t c = cnn.in_channels, h = cnn.height, w = cnn.width;
    for (std::size_t l = 0; l < cnn.channels.size(); ++l) {
      const std::size_t k = cnn.kernels[l], s = cnn.strides[l];
      if (s == 0 || h + 2 * cnn.padding < k || w + 2 * cnn.padding < k) {
        throw ShapeError("cnn: layer " + std::to_string(l) + " kernel " + std::to_string(k) +
                         " does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " map");
      }
      const std::size_t fan_in = c * k * k;
      layout->add("conv" + std::to_string(l) + ".weight", {cnn.channels[l], c, k, k}, fan_in);
      layout->add("conv" + std::to_string(l) + ".bias", {cnn.channels[l]}, fan_in);
      h = (h + 2 * cnn.padding - k) / s + 1;
      w = (w + 2 * cnn.padding - k) / s + 1;
      c = cnn.channels[l];
    }
    const std::size_t flat = c * h * w;
    layout->add("out.weight", {flat, cnn.classes}, flat);
    layout->add("out.bias", {cnn.classes}, flat);
    return layout;
  }

  void check_params(const ParamVector& params) const {
    if (params.size() != num_params()) {
      throw ShapeError("optimizee: got " + std::to_string(params.size()) + " parameters, expected " +
                       std::to_string(num_params()));
    }
  }

  void check_batch(const MiniBatch& batch) const {
    const ad::Shape in = input_shape();
    const std::size_t per = ad::numel(in);
    if (batch.size() == 0 || batch.features.size() != batch.size() * per) {
      throw ShapeError("optimizee: batch features " + ad::to_string(batch.features.shape()) + " do not match " +
                       std::to_string(batch.size()) + " examples of shape " + ad::to_string(in));
    }
  }

  ArchSpec spec_;
  std::shared_ptr<const ParamLayout> layout_;
  mutable EvalCounters counters_;
};

}  // namespace lgl2o
