#pragma once

#include <stdexcept>
#include <string>

namespace normbench {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents, ranks, or layer layouts.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, negative sqrt, zero denominators, failed convergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of an API contract (double backward, missing statistics, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Unparseable or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Corrupt, truncated, or mismatched checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace normbench
