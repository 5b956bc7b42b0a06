#pragma once

#include <stdexcept>
#include <string>

namespace llrn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or mode combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input values (labels, targets, batch sizes).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Dataset or checkpoint file could not be read.
class DataError : public Error {
 public:
  using Error::Error;
};

/// API misuse such as backpropagating through a stale cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace llrn
