#pragma once

#include <stdexcept>
#include <string>

namespace strode {

// Error taxonomy. Everything derives from strode::Error so callers can catch
// the whole family; the CLI maps these onto process exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors / layers / sequences.
struct DimensionError : Error {
    using Error::Error;
};

// A documented precondition was violated (non-scalar backward root, empty
// sequence, t_end < t_start, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration value (dropout rate >= 1, nonpositive step, ...).
struct ParameterError : Error {
    using Error::Error;
};

// Non-finite state encountered inside a numeric routine.
struct NumericError : Error {
    using Error::Error;
};

// Training-time failure: divergent loss, non-finite gradient.
struct TrainingError : Error {
    using Error::Error;
};

// File / serialization failure, with context (path, line).
struct IoError : Error {
    using Error::Error;
};

// Evaluation harness failure (missing ground truth, empty test set).
struct EvalError : Error {
    using Error::Error;
};

}  // namespace strode
