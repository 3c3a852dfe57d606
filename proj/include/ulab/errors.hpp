#pragma once

#include <stdexcept>
#include <string>

namespace ulab {

// Bad configuration key/value or malformed input file.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape incompatible with the requested operation.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misuse of the autograd machinery (missing lineage, repeated backward, ...).
struct AutogradError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed dataset / checkpoint / report files.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A training procedure failed to reach its target.
struct ConvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ulab
