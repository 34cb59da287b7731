#pragma once

#include <stdexcept>
#include <string>

namespace unblur {

// Invalid configuration values or operation arguments.
struct ParamError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Tensor/image dimensions incompatible with an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Unreadable files, malformed manifests, mismatched checkpoints.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses or parameters during optimization.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace unblur
