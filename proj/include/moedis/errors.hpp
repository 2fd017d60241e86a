#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moedis {

// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid sizes or hyperparameters (even kernel, d_h not divisible by n, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Out-of-range index or otherwise unusable argument.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf produced or supplied.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A primitive on the traced path has no forward-mode (tangent) rule.
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training data cannot define a boundary (e.g. one label class only).
class DegenerateDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Boundary fit accuracy below the acceptance floor.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pushforward column J w_i (or J b_i) has vanishing norm.
class DirectionCollapseError : public std::runtime_error {
 public:
  DirectionCollapseError(std::size_t attribute, const std::string& what)
      : std::runtime_error(what), attribute_(attribute) {}

  std::size_t attribute() const noexcept { return attribute_; }

 private:
  std::size_t attribute_;
};

// Malformed checkpoint or dataset file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace moedis
