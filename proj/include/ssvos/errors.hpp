#pragma once

#include <stdexcept>
#include <string>

namespace ssvos {

// Input-side failures (bad files, bad config, bad CLI usage). CLI exit code 1.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : InputError {
    using InputError::InputError;
};

struct ConfigError : InputError {
    using InputError::InputError;
};

// Internal contract violations (shape mismatches, broken preconditions). CLI exit code 2.
struct InternalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : InternalError {
    using InternalError::InternalError;
};

struct ContractError : InternalError {
    using InternalError::InternalError;
};

} // namespace ssvos
