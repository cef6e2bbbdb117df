#pragma once

#include <stdexcept>
#include <string>

namespace i2cl {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor, config, or container shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in a value or gradient, or an optimizer diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated binary/text file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace i2cl
