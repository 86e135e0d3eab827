#pragma once

#include <stdexcept>
#include <string>

namespace tecde {

// Caller passed something outside an operation's domain.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A simulation or model state violated an invariant.
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value produced during integration or training.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or incompatible file.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse, e.g. replaying a consumed tape.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace tecde
