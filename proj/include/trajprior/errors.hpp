#pragma once

#include <stdexcept>
#include <string>

namespace trajprior {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes or sizes that do not fit an operation.
class DimensionError : public Error {
  public:
    using Error::Error;
};

// Invalid configuration values (out-of-range hyperparameters, bad counts).
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Malformed or incompatible files.
class FormatError : public Error {
  public:
    using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericalError : public Error {
  public:
    using Error::Error;
};

// A pipeline stage was run before the stage that produces its input.
class StageDependencyError : public Error {
  public:
    using Error::Error;
};

} // namespace trajprior
