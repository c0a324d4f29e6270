#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace signrelu {

/// Input outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value was produced; `index` identifies the offending sample.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t index)
      : std::runtime_error(what + " (sample " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Training diverged at `step`.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// A constructed network failed its certification tolerance.
class ConstructionError : public std::runtime_error {
 public:
  ConstructionError(const std::string& what, double x, double y, double err)
      : std::runtime_error(what), x_(x), y_(y), err_(err) {}
  double x() const noexcept { return x_; }
  double y() const noexcept { return y_; }
  double error() const noexcept { return err_; }

 private:
  double x_, y_, err_;
};

class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace signrelu
