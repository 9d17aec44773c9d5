#pragma once

#include <stdexcept>
#include <string>

namespace tloc {

// The CLI maps these to exit codes 2, 3 and 4 respectively.

/// Invalid configuration or inconsistent inputs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read, written, or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf encountered during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tloc
