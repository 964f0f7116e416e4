#pragma once

#include <stdexcept>
#include <string>

namespace rial {

/// Bad configuration, malformed input files, violated preconditions on
/// user-supplied values. CLI exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Filtering left nothing to train on. CLI exit code 3.
class EmptyDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical contract was violated (step size left the simplex, non-finite
/// weights). CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, long step = -1) : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace rial
