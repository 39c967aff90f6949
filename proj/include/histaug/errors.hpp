#pragma once

#include <stdexcept>

namespace histaug {

/// Input violates a documented precondition or domain invariant.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// On-disk artifact is missing or malformed.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A numerical routine failed to converge or produced only non-finite values.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InfeasibleSplitError : ValidationError {
  using ValidationError::ValidationError;
};

}  // namespace histaug
