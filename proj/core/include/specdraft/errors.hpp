#pragma once

#include <stdexcept>
#include <string>

namespace specdraft {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar or configuration value outside its valid domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity surfaced in a computed value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A sequence would exceed the model's maximum length or a cache bound.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// File system or format failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace specdraft
