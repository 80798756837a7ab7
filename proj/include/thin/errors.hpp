#pragma once

#include <stdexcept>
#include <string>

namespace thin {

// Shape disagreement between operands.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid numeric input (division by zero, log of non-positive, NaN loss).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A documented precondition was violated by the caller.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad run configuration (unknown variant, missing frozen network, bad file).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unreadable or malformed input file.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace thin
