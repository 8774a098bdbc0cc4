// SPDX-License-Identifier: Apache-2.0
#pragma once

// Coordinate-wise LSTM learned optimizer.
//
// Every optimizee coordinate is fed through the same small recurrent network
// (shared weights, one hidden state per coordinate). Input per coordinate is
// the preprocessed gradient; output is a scaled additive update.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lgl2o/autodiff.hpp"
#include "lgl2o/error.hpp"
#include "lgl2o/optimizee.hpp"

namespace lgl2o {

/// Anything that maps (iterate, gradient at iterate) to a proposed iterate.
/// The learned optimizer is one; tests plug in hand-written rules.
class UpdateRule {
 public:
  virtual ~UpdateRule() = default;
  virtual ParamVector propose(const ParamVector& x, const ParamVector& g) = 0;
  /// Forget any per-coordinate state.
  virtual void reset() {}
};

/// UpdateRule backed by a callable.
class FunctionRule final : public UpdateRule {
 public:
  using Fn = std::function<ParamVector(const ParamVector&, const ParamVector&)>;
  explicit FunctionRule(Fn fn) : fn_(std::move(fn)) {}
  ParamVector propose(const ParamVector& x, const ParamVector& g) override { return fn_(x, g); }

 private:
  Fn fn_;
};

/// Gradient preprocessing: per coordinate
///   (log|g| / p, sign g)   if |g| >= exp(-p)
///   (-1, exp(p) * g)       otherwise.
struct Preprocessor {
  double p = 10.0;

  std::pair<double, double> operator()(double g) const {
    const double threshold = std::exp(-p);
    if (std::abs(g) >= threshold) return {std::log(std::abs(g)) / p, g > 0.0 ? 1.0 : -1.0};
    return {-1.0, std::exp(p) * g};
  }

  /// [n, 2] input matrix for n gradient coordinates.
  ad::Tensor apply(std::span<const double> g) const {
    ad::Tensor out = ad::Tensor::zeros({g.size(), 2});
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto [a, b] = (*this)(g[i]);
      out.at(i, 0) = a;
      out.at(i, 1) = b;
    }
    return out;
  }
};

struct L2OConfig {
  std::size_t hidden = 20;
  std::size_t layers = 2;
  double output_scale = 0.1;
  double preprocess_p = 10.0;

  friend bool operator==(const L2OConfig&, const L2OConfig&) = default;
};

inline constexpr std::size_t kPreprocessedInputs = 2;

/// Layout of the meta-parameters: per LSTM layer an input matrix, a recurrent
/// matrix and a bias (gate order i, f, g, o), then the linear head.
inline std::shared_ptr<const ParamLayout> l2o_layout(const L2OConfig& cfg) {
  auto layout = std::make_shared<ParamLayout>();
  const std::size_t H = cfg.hidden;
  std::size_t in = kPreprocessedInputs;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "lstm" + std::to_string(l) + ".";
    layout->add(p + "w_in", {in, 4 * H}, H);
    layout->add(p + "w_hidden", {H, 4 * H}, H);
    layout->add(p + "bias", {4 * H}, H);
    in = H;
  }
  layout->add("head.weight", {H, 1}, H);
  layout->add("head.bias", {1}, H);
  return layout;
}

/// Meta-parameters of the learned optimizer plus its fixed architecture.
struct L2OWeights {
  L2OConfig config;
  ParamVector zeta;

  static L2OWeights random(const L2OConfig& cfg, std::uint64_t seed) {
    return {cfg, init_fan_in_uniform(l2o_layout(cfg), seed)};
  }

  friend bool operator==(const L2OWeights&, const L2OWeights&) = default;
};

/// Recurrent state, one row per optimizee coordinate, per layer.
struct LstmState {
  std::vector<ad::Tensor> h;
  std::vector<ad::Tensor> c;

  static LstmState zeros(const L2OConfig& cfg, std::size_t coordinates) {
    LstmState s;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      s.h.push_back(ad::Tensor::zeros({coordinates, cfg.hidden}));
      s.c.push_back(ad::Tensor::zeros({coordinates, cfg.hidden}));
    }
    return s;
  }

  std::size_t rows() const { return h.empty() ? 0 : h.front().dim(0); }
};

/// Tape-level view of the recurrent state.
struct LstmVars {
  std::vector<ad::Var> h;
  std::vector<ad::Var> c;

  static LstmVars constants(ad::Tape& tape, const LstmState& s) {
    LstmVars v;
    for (const auto& t : s.h) v.h.push_back(tape.constant(t));
    for (const auto& t : s.c) v.c.push_back(tape.constant(t));
    return v;
  }

  LstmState values() const {
    LstmState s;
    for (const auto& v : h) s.h.push_back(v.value());
    for (const auto& v : c) s.c.push_back(v.value());
    return s;
  }
};

/// One Var per meta-parameter block.
inline std::vector<ad::Var> zeta_vars(ad::Tape& tape, const ParamVector& zeta, bool requires_grad) {
  std::vector<ad::Var> out;
  for (auto& t : zeta.unflatten()) out.push_back(tape.leaf(std::move(t), requires_grad));
  return out;
}

/// Runs the LSTM stack one step on `input` ([n, 2]), advancing `state`, and
/// returns the raw head output as a flat [n] Var (unscaled).
inline ad::Var lstm_forward(const L2OConfig& cfg, const std::vector<ad::Var>& zeta, ad::Var input, LstmVars& state) {
  const std::size_t H = cfg.hidden;
  const std::size_t n = input.shape().at(0);
  ad::Var x = input;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const ad::Var& w_in = zeta[3 * l];
    const ad::Var& w_hidden = zeta[3 * l + 1];
    const ad::Var& bias = zeta[3 * l + 2];
    ad::Var gates = ad::add(ad::add(ad::matmul(x, w_in), ad::matmul(state.h[l], w_hidden)), bias);
    ad::Var in_gate = ad::sigmoid(ad::slice(gates, 1, 0, H));
    ad::Var forget_gate = ad::sigmoid(ad::slice(gates, 1, H, 2 * H));
    ad::Var cell_in = ad::tanh(ad::slice(gates, 1, 2 * H, 3 * H));
    ad::Var out_gate = ad::sigmoid(ad::slice(gates, 1, 3 * H, 4 * H));
    state.c[l] = ad::add(ad::mul(forget_gate, state.c[l]), ad::mul(in_gate, cell_in));
    state.h[l] = ad::mul(out_gate, ad::tanh(state.c[l]));
    x = state.h[l];
  }
  const std::size_t head = 3 * cfg.layers;
  return ad::reshape(ad::add(ad::matmul(x, zeta[head]), zeta[head + 1]), {n});
}

/// The learned optimizer at meta-test time: y = x + s * head(LSTM(pre(g))).
/// Hidden state persists across calls until reset().
class L2OOptimizer final : public UpdateRule {
 public:
  explicit L2OOptimizer(L2OWeights weights) : weights_(std::move(weights)) {
    if (weights_.zeta.size() != l2o_layout(weights_.config)->total()) {
      throw ShapeError("l2o: weight vector does not match the configured architecture");
    }
  }

  const L2OWeights& weights() const noexcept { return weights_; }
  const LstmState& state() const noexcept { return state_; }
  void set_state(LstmState s) { state_ = std::move(s); }
  std::size_t steps() const noexcept { return steps_; }

  /// Zeroes the hidden state for `coordinates` rows.
  void reset(std::size_t coordinates) {
    state_ = LstmState::zeros(weights_.config, coordinates);
    steps_ = 0;
  }
  void reset() override { state_ = {}; steps_ = 0; }

  /// Proposes the next iterate. The hidden state advances only when the
  /// proposal is finite; otherwise a DivergenceError carrying the step index
  /// is thrown and the state is left as it was.
  ParamVector propose(const ParamVector& x, const ParamVector& g) override {
    if (x.size() != g.size()) throw ShapeError("l2o: iterate and gradient sizes differ");
    if (state_.rows() == 0) reset(x.size());
    if (state_.rows() != x.size()) {
      throw ShapeError("l2o: hidden state has " + std::to_string(state_.rows()) + " rows for " +
                       std::to_string(x.size()) + " coordinates");
    }
    ad::Tape tape;
    const auto zeta = zeta_vars(tape, weights_.zeta, false);
    LstmVars vars = LstmVars::constants(tape, state_);
    const Preprocessor pre{weights_.config.preprocess_p};
    ad::Var update = lstm_forward(weights_.config, zeta, tape.constant(pre.apply(g.values())), vars);
    ParamVector y = x;
    const double s = weights_.config.output_scale;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * update.value()[i];
    if (!y.all_finite()) {
      throw DivergenceError("l2o: non-finite proposal at step " + std::to_string(steps_), steps_);
    }
    state_ = vars.values();
    ++steps_;
    return y;
  }

 private:
  L2OWeights weights_;
  LstmState state_;
  std::size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Weight file: "LGL2OW\0\0", u32 version, u32 hidden, u32 layers,
// f64 output_scale, f64 preprocess_p, u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, u64 extents, f64 values.
// All integers and floats little-endian.

inline constexpr char kWeightMagic[8] = {'L', 'G', 'L', '2', 'O', 'W', '\0', '\0'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("weights: truncated file at byte " + std::to_string(pos_));
  }
  template <class T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_weights(const L2OWeights& w) {
  detail::ByteWriter out;
  out.raw(kWeightMagic, sizeof(kWeightMagic));
  out.le<std::uint32_t>(kWeightVersion);
  out.le<std::uint32_t>(static_cast<std::uint32_t>(w.config.hidden));
  out.le<std::uint32_t>(static_cast<std::uint32_t>(w.config.layers));
  out.f64(w.config.output_scale);
  out.f64(w.config.preprocess_p);
  const auto& blocks = w.zeta.layout()->blocks();
  out.le<std::uint32_t>(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    out.le<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    out.raw(b.name.data(), b.name.size());
    out.le<std::uint32_t>(static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t e : b.shape) out.le<std::uint64_t>(e);
    for (std::size_t i = 0; i < b.size(); ++i) out.f64(w.zeta[b.offset + i]);
  }
  return out.bytes();
}

inline L2OWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.str(sizeof(kWeightMagic)) != std::string(kWeightMagic, sizeof(kWeightMagic))) {
    throw ParseError("weights: bad magic, not an L2O weight file");
  }
  const auto version = in.le<std::uint32_t>();
  if (version != kWeightVersion) {
    throw ParseError("weights: unsupported version " + std::to_string(version) + " (expected " +
                     std::to_string(kWeightVersion) + ")");
  }
  L2OConfig cfg;
  cfg.hidden = in.le<std::uint32_t>();
  cfg.layers = in.le<std::uint32_t>();
  cfg.output_scale = in.f64();
  cfg.preprocess_p = in.f64();
  if (cfg.hidden == 0 || cfg.layers == 0) throw ParseError("weights: empty architecture in header");
  const auto layout = l2o_layout(cfg);
  const auto count = in.le<std::uint32_t>();
  if (count != layout->blocks().size()) {
    throw ParseError("weights: " + std::to_string(count) + " tensors, architecture needs " +
                     std::to_string(layout->blocks().size()));
  }
  ParamVector zeta(layout);
  for (const auto& b : layout->blocks()) {
    const std::string name = in.str(in.le<std::uint32_t>());
    if (name != b.name) throw ParseError("weights: expected tensor '" + b.name + "', found '" + name + "'");
    const auto rank = in.le<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(in.le<std::uint64_t>());
    if (shape != b.shape) {
      throw ParseError("weights: tensor '" + name + "' has shape " + ad::to_string(shape) + ", expected " +
                       ad::to_string(b.shape));
    }
    for (std::size_t i = 0; i < b.size(); ++i) zeta[b.offset + i] = in.f64();
  }
  if (!in.done()) throw ParseError("weights: trailing bytes after last tensor");
  return {cfg, std::move(zeta)};
}

inline void save_weights(const L2OWeights& w, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline L2OWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_weights(bytes);
}

}  // namespace lgl2o
