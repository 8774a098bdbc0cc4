// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lgl2o {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or parameter shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated input file (IDX, CIFAR, weight files).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `line` is 0 when not tied to a file line.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, std::size_t line = 0)
      : Error(line == 0 ? message : "line " + std::to_string(line) + ": " + message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A quantity that must stay finite did not (fallback gradient, fallback
/// iterate, meta-loss).
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::size_t step = 0)
      : Error(message), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace lgl2o
