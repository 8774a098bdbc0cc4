// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense reverse-mode automatic differentiation.
//
// A Tape records every operation applied to its Vars. Values are 64-bit
// floats in row-major order. Tapes are explicit objects: create one per
// forward pass (or per truncation window during meta-training) and let it go
// out of scope to free the graph. Vars are cheap handles into their tape and
// must not outlive it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lgl2o/error.hpp"

namespace lgl2o::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional array of doubles.
class Tensor {
 public:
  /// Scalar zero.
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + to_string(shape_) + " holds " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor filled(Shape shape, double value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({}, {value}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
      throw ShapeError("tensor: += between " + to_string(shape_) + " and " + to_string(other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Accumulated gradient of a leaf (zeros when backward never reached it).
  Tensor grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward rule sees. `grad_in[i]` is null when input i needs no
/// gradient; rules accumulate (+=) into the non-null ones.
struct BackwardArgs {
  const Tensor& out;
  const Tensor& upstream;
  std::span<const Tensor* const> in;
  std::span<Tensor* const> grad_in;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. The backward rule is kept only when some input
  /// requires a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (std::size_t id : inputs) needs = needs || nodes_.at(id).requires_grad;
    if (!needs) {
      inputs.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs, false, {}});
    return Var(this, nodes_.size() - 1);
  }

  /// Accumulates d(root)/d(leaf) into every leaf that requires a gradient.
  /// Repeated calls accumulate; use zero_grad() to reset.
  void backward(Var root) {
    check_root(root, "backward");
    auto adjoints = propagate(root, 0);
    for (std::size_t id = 0; id <= root.id(); ++id) {
      Node& node = nodes_[id];
      if (!node.leaf || !node.requires_grad || !adjoints.present[id]) continue;
      if (node.grad.size() != node.value.size() || node.grad.shape() != node.value.shape()) {
        node.grad = Tensor::zeros(node.value.shape());
      }
      node.grad += adjoints.values[id];
    }
  }

  /// d(root)/d(wrt) for any recorded Var (leaf or intermediate). Leaf grads
  /// are left untouched. Only nodes recorded after `wrt` are visited.
  Tensor gradient(Var root, Var wrt) {
    check_root(root, "gradient");
    if (wrt.tape_ != this) throw Error("gradient: variable belongs to another tape");
    if (wrt.id() > root.id()) return Tensor::zeros(value(wrt.id()).shape());
    auto adjoints = propagate(root, wrt.id());
    if (!adjoints.present[wrt.id()]) return Tensor::zeros(value(wrt.id()).shape());
    return std::move(adjoints.values[wrt.id()]);
  }

  void zero_grad() {
    for (Node& node : nodes_) {
      if (node.leaf && node.requires_grad) node.grad = Tensor::zeros(node.value.shape());
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  Tensor grad(std::size_t id) const {
    const Node& node = nodes_.at(id);
    if (node.grad.shape() == node.value.shape() && node.grad.size() == node.value.size()) return node.grad;
    return Tensor::zeros(node.value.shape());
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    bool leaf;
    Tensor grad;
  };

  struct Adjoints {
    std::vector<Tensor> values;
    std::vector<char> present;
  };

  void check_root(Var root, const char* what) const {
    if (root.tape_ != this) throw Error(std::string(what) + ": root belongs to another tape");
    const Tensor& v = nodes_.at(root.id()).value;
    if (v.size() != 1) {
      throw ShapeError(std::string(what) + ": root must be scalar, got shape " + to_string(v.shape()));
    }
  }

  // Reverse sweep from root down to node `lowest`. Each node is visited once,
  // in reverse recording order, which is a valid reverse topological order.
  Adjoints propagate(Var root, std::size_t lowest) {
    Adjoints adj{std::vector<Tensor>(root.id() + 1), std::vector<char>(root.id() + 1, 0)};
    adj.values[root.id()] = Tensor::filled(nodes_[root.id()].value.shape(), 1.0);
    adj.present[root.id()] = 1;

    std::vector<const Tensor*> in;
    std::vector<Tensor*> grad_in;
    for (std::size_t id = root.id() + 1; id-- > lowest;) {
      if (!adj.present[id]) continue;
      const Node& node = nodes_[id];
      if (node.leaf || !node.backward) continue;
      in.clear();
      grad_in.clear();
      for (std::size_t input : node.inputs) {
        in.push_back(&nodes_[input].value);
        if (!nodes_[input].requires_grad || input < lowest) {
          grad_in.push_back(nullptr);
          continue;
        }
        if (!adj.present[input]) {
          adj.values[input] = Tensor::zeros(nodes_[input].value.shape());
          adj.present[input] = 1;
        }
        grad_in.push_back(&adj.values[input]);
      }
      node.backward(BackwardArgs{node.value, adj.values[id], in, grad_in});
    }
    return adj;
  }

  // deque keeps references returned by Var::value() stable while recording.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline Tensor Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline Tape& same_tape(const char* op, std::initializer_list<Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": uninitialised variable");
    if (tape && &v.tape() != tape) throw Error(std::string(op) + ": inputs live on different tapes");
    tape = &v.tape();
  }
  return *tape;
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

template <class F, class DF>
Var unary(const char* op, Var a, F f, DF df_from_out) {
  Tape& tape = same_tape(op, {a});
  Tensor out = a.value();
  for (double& v : out.values()) v = f(v);
  return tape.record(std::move(out), {a.id()}, [df_from_out](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    auto& gi = args.grad_in[0]->values();
    const auto& x = args.in[0]->values();
    const auto& y = args.out.values();
    const auto& up = args.upstream.values();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += up[i] * df_from_out(x[i], y[i]);
  });
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape("matmul", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) detail::shape_mismatch("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C = Tensor::zeros({m, n});
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return tape.record(std::move(C), {a.id(), b.id()}, [m, k, n](const BackwardArgs& args) {
    const double* pa = args.in[0]->data().data();
    const double* pb = args.in[1]->data().data();
    const double* up = args.upstream.data().data();
    if (args.grad_in[0]) {
      double* ga = args.grad_in[0]->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += up[i * n + j] * pb[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (args.grad_in[1]) {
      double* gb = args.grad_in[1]->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * up[i * n + j];
        }
      }
    }
  });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// input [N,C,H,W], kernel [O,C,kh,kw] -> [N,O,H',W'] with
/// H' = (H + 2*padding - kh) / stride + 1.
inline Var conv2d(Var input, Var kernel, Conv2dOptions opt = {}) {
  Tape& tape = detail::same_tape("conv2d", {input, kernel});
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  if (X.rank() != 4 || K.rank() != 4 || X.dim(1) != K.dim(1) || opt.stride == 0) {
    detail::shape_mismatch("conv2d", X.shape(), K.shape());
  }
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t O = K.dim(0), kh = K.dim(2), kw = K.dim(3);
  const std::size_t pad = opt.padding, s = opt.stride;
  if (H + 2 * pad < kh || W + 2 * pad < kw) detail::shape_mismatch("conv2d", X.shape(), K.shape());
  const std::size_t Ho = (H + 2 * pad - kh) / s + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / s + 1;

  // Visits every (output, input, kernel) triple that contributes.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t y = 0; y < Ho; ++y)
          for (std::size_t x = 0; x < Wo; ++x) {
            const std::size_t out_idx = ((n * O + o) * Ho + y) * Wo + x;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < kh; ++i) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * s + i) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t j = 0; j < kw; ++j) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * s + j) - static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t in_idx = ((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                  const std::size_t k_idx = ((o * C + c) * kh + i) * kw + j;
                  visit(out_idx, in_idx, k_idx);
                }
              }
          }
  };

  Tensor Y = Tensor::zeros({N, O, Ho, Wo});
  {
    const double* px = X.data().data();
    const double* pk = K.data().data();
    double* py = Y.data().data();
    for_each_tap([&](std::size_t o, std::size_t in, std::size_t k) { py[o] += pk[k] * px[in]; });
  }
  return tape.record(std::move(Y), {input.id(), kernel.id()}, [for_each_tap](const BackwardArgs& args) {
    const double* px = args.in[0]->data().data();
    const double* pk = args.in[1]->data().data();
    const double* up = args.upstream.data().data();
    double* gx = args.grad_in[0] ? args.grad_in[0]->data().data() : nullptr;
    double* gk = args.grad_in[1] ? args.grad_in[1]->data().data() : nullptr;
    for_each_tap([&](std::size_t o, std::size_t in, std::size_t k) {
      if (gx) gx[in] += up[o] * pk[k];
      if (gk) gk[k] += up[o] * px[in];
    });
  });
}

/// Elementwise sum. `b` may also be a vector matching the columns of a
/// matrix `a` (bias broadcast over rows), or a vector matching axis 1 of a
/// rank-4 `a` (per-channel bias).
inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape("add", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  enum class Mode { same, last_axis, channel } mode;
  std::size_t inner = 1, channels = 1;
  if (A.shape() == B.shape()) {
    mode = Mode::same;
  } else if (B.rank() == 1 && A.rank() == 2 && A.dim(1) == B.dim(0)) {
    mode = Mode::last_axis;
    channels = B.dim(0);
  } else if (B.rank() == 1 && A.rank() == 4 && A.dim(1) == B.dim(0)) {
    mode = Mode::channel;
    channels = B.dim(0);
    inner = A.dim(2) * A.dim(3);
  } else {
    detail::shape_mismatch("add", A.shape(), B.shape());
  }
  // Index into b for flat index i of a.
  auto b_index = [mode, inner, channels](std::size_t i) -> std::size_t {
    switch (mode) {
      case Mode::same: return i;
      case Mode::last_axis: return i % channels;
      case Mode::channel: return (i / inner) % channels;
    }
    return i;
  };
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[b_index(i)];
  return tape.record(std::move(out), {a.id(), b.id()}, [b_index](const BackwardArgs& args) {
    const auto& up = args.upstream.values();
    if (args.grad_in[0]) *args.grad_in[0] += args.upstream;
    if (args.grad_in[1]) {
      auto& gb = args.grad_in[1]->values();
      for (std::size_t i = 0; i < up.size(); ++i) gb[b_index(i)] += up[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape("sub", {a, b});
  if (a.shape() != b.shape()) detail::shape_mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardArgs& args) {
    if (args.grad_in[0]) *args.grad_in[0] += args.upstream;
    if (args.grad_in[1]) {
      auto& g = args.grad_in[1]->values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= args.upstream[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape("mul", {a, b});
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardArgs& args) {
    const auto& up = args.upstream.values();
    if (args.grad_in[0]) {
      auto& g = args.grad_in[0]->values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * (*args.in[1])[i];
    }
    if (args.grad_in[1]) {
      auto& g = args.grad_in[1]->values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * (*args.in[0])[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tape& tape = detail::same_tape("scale", {a});
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return tape.record(std::move(out), {a.id()}, [factor](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    auto& g = args.grad_in[0]->values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * args.upstream[i];
  });
}

inline double sigmoid_value(double x) {
  // Split by sign so exp never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Row-wise log-softmax of a [m,n] matrix.
inline Var log_softmax(Var a) {
  Tape& tape = detail::same_tape("log_softmax", {a});
  const Tensor& A = a.value();
  if (A.rank() != 2) throw ShapeError("log_softmax: expected rank 2, got " + to_string(A.shape()));
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor out = A;
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) row[j] -= lse;
  }
  return tape.record(std::move(out), {a.id()}, [m, n](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    double* g = args.grad_in[0]->data().data();
    const double* y = args.out.data().data();
    const double* up = args.upstream.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += up[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += up[i * n + j] - std::exp(y[i * n + j]) * total;
    }
  });
}

/// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
inline Var nll_loss(Var log_probs, std::span<const int> labels) {
  Tape& tape = detail::same_tape("nll_loss", {log_probs});
  const Tensor& P = log_probs.value();
  if (P.rank() != 2 || P.dim(0) != labels.size() || P.dim(0) == 0) {
    throw ShapeError("nll_loss: log-probabilities " + to_string(P.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t m = P.dim(0), n = P.dim(1);
  std::vector<std::size_t> cols(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw ShapeError("nll_loss: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(n) + ")");
    }
    cols[i] = static_cast<std::size_t>(labels[i]);
    total -= P.at(i, cols[i]);
  }
  return tape.record(Tensor::scalar(total / static_cast<double>(m)), {log_probs.id()},
                     [cols = std::move(cols), n](const BackwardArgs& args) {
                       if (!args.grad_in[0]) return;
                       const double w = -args.upstream[0] / static_cast<double>(cols.size());
                       double* g = args.grad_in[0]->data().data();
                       for (std::size_t i = 0; i < cols.size(); ++i) g[i * n + cols[i]] += w;
                     });
}

/// Joins tensors along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    if (&p.tape() != &tape) throw Error("concat: inputs live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) detail::shape_mismatch("concat", first, s);
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    extents.push_back(s[axis]);
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  const std::size_t out_row = out_shape[axis] * inner;

  Tensor out = Tensor::zeros(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t row = extents[p] * inner;
    const double* src = parts[p].value().data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * row, row, out.data().data() + o * out_row + offset);
    offset += row;
  }
  return tape.record(std::move(out), std::move(ids), [extents, outer, inner, out_row](const BackwardArgs& args) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      const std::size_t row = extents[p] * inner;
      if (args.grad_in[p]) {
        double* g = args.grad_in[p]->data().data();
        const double* up = args.upstream.data().data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < row; ++i) g[o * row + i] += up[o * out_row + offset + i];
      }
      offset += row;
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = detail::same_tape("slice", {a});
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(s));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out = Tensor::zeros(out_shape);
  const double* src = a.value().data().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * in_row + start, out_row, out.data().data() + o * out_row);
  return tape.record(std::move(out), {a.id()}, [outer, in_row, out_row, start](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    double* g = args.grad_in[0]->data().data();
    const double* up = args.upstream.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < out_row; ++i) g[o * in_row + start + i] += up[o * out_row + i];
  });
}

inline Var reshape(Var a, Shape shape) {
  Tape& tape = detail::same_tape("reshape", {a});
  if (numel(shape) != a.value().size()) detail::shape_mismatch("reshape", a.shape(), shape);
  Tensor out(std::move(shape), a.value().values());
  return tape.record(std::move(out), {a.id()}, [](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    auto& g = args.grad_in[0]->values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += args.upstream[i];
  });
}

/// Sum of all elements, as a scalar.
inline Var sum(Var a) {
  Tape& tape = detail::same_tape("sum", {a});
  const auto& v = a.value().values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return tape.record(Tensor::scalar(total), {a.id()}, [](const BackwardArgs& args) {
    if (!args.grad_in[0]) return;
    for (double& g : args.grad_in[0]->values()) g += args.upstream[0];
  });
}

/// Copy of the value with gradient flow severed.
inline Var detach(Var a) {
  Tape& tape = detail::same_tape("detach", {a});
  return tape.constant(a.value());
}

}  // namespace lgl2o::ad
