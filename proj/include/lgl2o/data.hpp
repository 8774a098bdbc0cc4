// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lgl2o/error.hpp"
#include "lgl2o/optimizee.hpp"
#include "lgl2o/rng.hpp"

namespace lgl2o {

/// Labelled examples; features are stored flat, N rows of feature_shape.
struct Dataset {
  std::string name;
  ad::Shape feature_shape;
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t classes = 2;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t feature_size() const { return ad::numel(feature_shape); }

  void validate() const {
    if (labels.empty()) throw Error("dataset '" + name + "': empty");
    if (features.size() != labels.size() * feature_size()) {
      throw ShapeError("dataset '" + name + "': " + std::to_string(features.size()) + " feature values for " +
                       std::to_string(labels.size()) + " rows of " + ad::to_string(feature_shape));
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw Error("dataset '" + name + "': label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
      }
    }
  }

  MiniBatch batch(std::span<const std::size_t> rows) const {
    const std::size_t d = feature_size();
    ad::Shape shape{rows.size()};
    shape.insert(shape.end(), feature_shape.begin(), feature_shape.end());
    std::vector<double> x(rows.size() * d);
    std::vector<int> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d, x.begin() + static_cast<std::ptrdiff_t>(i * d));
      y[i] = labels[rows[i]];
    }
    return MiniBatch{ad::Tensor(std::move(shape), std::move(x)), std::move(y), {rows.begin(), rows.end()}};
  }

  MiniBatch all() const {
    std::vector<std::size_t> rows(size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return batch(rows);
  }
};

namespace detail {

inline std::vector<double> linspace(double lo, double hi, std::size_t n, bool endpoint) {
  std::vector<double> out(n);
  if (n == 0) return out;
  const double div = endpoint ? static_cast<double>(n > 1 ? n - 1 : 1) : static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = lo + (hi - lo) * static_cast<double>(i) / div;
  return out;
}

inline void check_generator_args(std::size_t n, double noise) {
  if (n < 2) throw Error("dataset generator: need at least 2 points");
  if (!(noise >= 0.0)) throw Error("dataset generator: noise must be non-negative");
}

inline Dataset make_2d(std::string name, std::vector<double> xy, std::vector<int> labels, double noise, std::uint64_t seed) {
  Rng rng(seed);
  if (noise > 0.0)
    for (double& v : xy) v += rng.normal(0.0, noise);
  Dataset ds{std::move(name), {2}, std::move(xy), std::move(labels), 2};
  ds.validate();
  return ds;
}

}  // namespace detail

/// Two interleaved half circles (class 0 upper, class 1 lower and shifted).
inline Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed) {
  detail::check_generator_args(n, noise);
  const std::size_t n_out = n / 2, n_in = n - n_out;
  std::vector<double> xy;
  std::vector<int> labels;
  for (double t : detail::linspace(0.0, std::numbers::pi, n_out, true)) {
    xy.insert(xy.end(), {std::cos(t), std::sin(t)});
    labels.push_back(0);
  }
  for (double t : detail::linspace(0.0, std::numbers::pi, n_in, true)) {
    xy.insert(xy.end(), {1.0 - std::cos(t), 1.0 - std::sin(t) - 0.5});
    labels.push_back(1);
  }
  return detail::make_2d("moons", std::move(xy), std::move(labels), noise, seed);
}

/// Concentric circles: class 0 radius 1, class 1 radius `factor` (0.5).
inline Dataset gen_circles(std::size_t n, double noise, std::uint64_t seed, double factor = 0.5) {
  detail::check_generator_args(n, noise);
  const std::size_t n_out = n / 2, n_in = n - n_out;
  std::vector<double> xy;
  std::vector<int> labels;
  for (double t : detail::linspace(0.0, 2.0 * std::numbers::pi, n_out, false)) {
    xy.insert(xy.end(), {std::cos(t), std::sin(t)});
    labels.push_back(0);
  }
  for (double t : detail::linspace(0.0, 2.0 * std::numbers::pi, n_in, false)) {
    xy.insert(xy.end(), {factor * std::cos(t), factor * std::sin(t)});
    labels.push_back(1);
  }
  return detail::make_2d("circles", std::move(xy), std::move(labels), noise, seed);
}

/// Two Archimedean spirals of `revolutions` turns each, radius growing
/// linearly from 0 to 1; class 1 is class 0 rotated by pi.
inline Dataset gen_spirals(std::size_t n, double noise, std::uint64_t seed, double revolutions = 1.5) {
  detail::check_generator_args(n, noise);
  if (!(revolutions > 0.0)) throw Error("gen_spirals: revolutions must be positive");
  const std::size_t n0 = n / 2, n1 = n - n0;
  const double turns = 2.0 * std::numbers::pi * revolutions;
  std::vector<double> xy;
  std::vector<int> labels;
  for (double t : detail::linspace(0.0, turns, n0, true)) {
    const double r = t / turns;
    xy.insert(xy.end(), {r * std::cos(t), r * std::sin(t)});
    labels.push_back(0);
  }
  for (double t : detail::linspace(0.0, turns, n1, true)) {
    const double r = t / turns;
    xy.insert(xy.end(), {-r * std::cos(t), -r * std::sin(t)});
    labels.push_back(1);
  }
  return detail::make_2d("spirals", std::move(xy), std::move(labels), noise, seed);
}

/// Writes `x0,...,x{d-1},label` rows with a header.
inline void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  const std::size_t d = ds.feature_size();
  for (std::size_t j = 0; j < d; ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << ds.features[i * d + j] << ',';
    out << ds.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// MNIST IDX and CIFAR-10 binary formats.

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw ParseError(what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<double> pixels;  // scaled to [0,1]
};

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = detail::read_be32(bytes, 0, "idx labels");
  if (magic != kIdxLabelsMagic) throw ParseError("idx labels: bad magic " + std::to_string(magic));
  const std::size_t count = detail::read_be32(bytes, 4, "idx labels");
  if (bytes.size() < 8 + count) {
    throw ParseError("idx labels: header promises " + std::to_string(count) + " labels, file holds " +
                     std::to_string(bytes.size() - 8));
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = detail::read_be32(bytes, 0, "idx images");
  if (magic != kIdxImagesMagic) throw ParseError("idx images: bad magic " + std::to_string(magic));
  IdxImages img;
  img.count = detail::read_be32(bytes, 4, "idx images");
  img.rows = detail::read_be32(bytes, 8, "idx images");
  img.cols = detail::read_be32(bytes, 12, "idx images");
  const std::size_t need = img.count * img.rows * img.cols;
  if (bytes.size() < 16 + need) {
    throw ParseError("idx images: header promises " + std::to_string(need) + " pixels, file holds " +
                     std::to_string(bytes.size() - 16));
  }
  img.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i) img.pixels[i] = bytes[16 + i] / 255.0;
  return img;
}

/// Builds a dataset from parsed IDX images and labels.
inline Dataset mnist_from_idx(const IdxImages& images, const std::vector<int>& labels, std::string name = "mnist") {
  if (images.count != labels.size()) {
    throw ParseError("mnist: " + std::to_string(images.count) + " images but " + std::to_string(labels.size()) + " labels");
  }
  Dataset ds{std::move(name), {1, images.rows, images.cols}, images.pixels, labels, 10};
  ds.validate();
  return ds;
}

/// Reads `<dir>/<split>-images-idx3-ubyte` and `<dir>/<split>-labels-idx1-ubyte`
/// (split is "train" or "t10k").
inline Dataset load_mnist(const std::filesystem::path& dir, const std::string& split = "train") {
  const auto images = parse_idx_images(detail::read_file(dir / (split + "-images-idx3-ubyte")));
  const auto labels = parse_idx_labels(detail::read_file(dir / (split + "-labels-idx1-ubyte")));
  return mnist_from_idx(images, labels);
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
/// (channel-major 3x32x32).
inline void append_cifar10(std::span<const std::uint8_t> bytes, Dataset& ds) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw ParseError("cifar10: " + std::to_string(bytes.size()) + " bytes is not a whole number of 3073-byte records");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) throw ParseError("cifar10: record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    ds.labels.push_back(rec[0]);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i) ds.features.push_back(rec[i] / 255.0);
  }
}

inline Dataset load_cifar10(const std::vector<std::filesystem::path>& batch_files) {
  Dataset ds{"cifar10", {3, 32, 32}, {}, {}, 10};
  for (const auto& f : batch_files) append_cifar10(detail::read_file(f), ds);
  ds.validate();
  return ds;
}

/// Directory holding downloaded datasets: $LGL2O_DATA_ROOT, else "./data".
inline std::filesystem::path dataset_root() {
  if (const char* env = std::getenv("LGL2O_DATA_ROOT"); env && *env) return env;
  return "data";
}

// ---------------------------------------------------------------------------
// Mini-batch sampling.

enum class SamplingPolicy { uniform_with_replacement, epoch_shuffle };

inline constexpr std::size_t kDefaultBatchSize = 128;

/// Draws training and validation mini-batches from a dataset. Training and
/// validation batches come from separate random streams, so consumers that
/// only draw training batches see the same sequence as consumers that also
/// validate.
class BatchSampler {
 public:
  BatchSampler(std::shared_ptr<const Dataset> data, std::uint64_t seed, std::size_t batch_size = kDefaultBatchSize,
               SamplingPolicy policy = SamplingPolicy::uniform_with_replacement)
      : data_(std::move(data)),
        batch_size_(batch_size),
        policy_(policy),
        train_rng_(Rng::derive(seed, 11)),
        validation_rng_(Rng::derive(seed, 12)) {
    if (!data_ || data_->size() == 0) throw Error("sampler: empty dataset");
    if (batch_size_ == 0) throw Error("sampler: batch size must be positive");
    if (data_->size() < batch_size_) {
      throw Error("sampler: dataset '" + data_->name + "' has " + std::to_string(data_->size()) +
                  " rows, fewer than the batch size " + std::to_string(batch_size_));
    }
  }

  const Dataset& dataset() const noexcept { return *data_; }
  std::size_t batch_size() const noexcept { return batch_size_; }

  MiniBatch next() {
    std::vector<std::size_t> rows(batch_size_);
    if (policy_ == SamplingPolicy::uniform_with_replacement) {
      for (auto& r : rows) r = train_rng_.below(data_->size());
    } else {
      for (auto& r : rows) {
        if (cursor_ == order_.size()) reshuffle();
        r = order_[cursor_++];
      }
    }
    return data_->batch(rows);
  }

  /// k training batches.
  std::vector<MiniBatch> sample(std::size_t k) {
    if (k == 0) throw Error("sampler: k must be at least 1");
    std::vector<MiniBatch> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(next());
    return out;
  }

  /// k validation batches drawn uniformly (with replacement) from the rows
  /// not used by `exclude`. When the excluded batches cover so much of the
  /// dataset that less than one batch of rows would remain, only the newest
  /// batches that still leave a full batch free are excluded.
  std::vector<MiniBatch> sample_validation(std::size_t k, std::span<const MiniBatch> exclude) {
    if (k == 0) throw Error("sampler: k must be at least 1");
    std::unordered_set<std::size_t> used;
    for (auto it = exclude.rbegin(); it != exclude.rend(); ++it) {
      std::unordered_set<std::size_t> grown = used;
      grown.insert(it->indices.begin(), it->indices.end());
      if (data_->size() - grown.size() < batch_size_) break;
      used = std::move(grown);
    }
    std::vector<MiniBatch> out;
    out.reserve(k);
    std::vector<std::size_t> rows(batch_size_);
    for (std::size_t i = 0; i < k; ++i) {
      for (auto& r : rows) {
        do {
          r = validation_rng_.below(data_->size());
        } while (used.contains(r));
      }
      out.push_back(data_->batch(rows));
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(data_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[train_rng_.below(i)]);
    cursor_ = 0;
  }

  std::shared_ptr<const Dataset> data_;
  std::size_t batch_size_;
  SamplingPolicy policy_;
  Rng train_rng_;
  Rng validation_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Mean mini-batch gradient against the full-data gradient at one point.
struct GradientStats {
  ParamVector full_gradient;
  ParamVector mean_minibatch_gradient;
  double cosine = 0.0;
  /// E||g_mb - g||^2 estimated over the drawn batches.
  double variance = 0.0;
};

inline GradientStats gradient_statistics(const Optimizee& net, const ParamVector& params, BatchSampler& sampler,
                                         std::size_t batches) {
  GradientStats s;
  s.full_gradient = net.grad_loss(params, sampler.dataset().all());
  s.mean_minibatch_gradient = ParamVector(params.layout());
  std::vector<ParamVector> grads;
  for (std::size_t b = 0; b < batches; ++b) {
    grads.push_back(net.grad_loss(params, sampler.next()));
    for (std::size_t i = 0; i < params.size(); ++i) s.mean_minibatch_gradient[i] += grads.back()[i] / static_cast<double>(batches);
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) dot += s.full_gradient[i] * s.mean_minibatch_gradient[i];
  s.cosine = dot / (s.full_gradient.norm() * s.mean_minibatch_gradient.norm());
  for (const auto& g : grads) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) d2 += (g[i] - s.full_gradient[i]) * (g[i] - s.full_gradient[i]);
    s.variance += d2 / static_cast<double>(batches);
  }
  return s;
}

}  // namespace lgl2o
