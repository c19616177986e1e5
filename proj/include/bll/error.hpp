#pragma once

#include <stdexcept>
#include <string>

namespace bll {

// Bad input: malformed files, violated preconditions, bad configuration.
// The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The binary container could not be decoded.
class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Something went wrong while computing (non-finite iterate, I/O failure).
// The CLI maps these to exit code 3.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public RuntimeError {
public:
    using RuntimeError::RuntimeError;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

} // namespace detail

} // namespace bll
