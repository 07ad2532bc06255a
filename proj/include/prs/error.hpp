#pragma once

#include <stdexcept>
#include <string>

namespace prs {

/// Raised when an argument violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Shape or wiring mismatch between layers, parameters and inputs.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite loss or gradient encountered during optimization.
class TrainingDivergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Object used before it is ready (untrained predictor, NaN parameters).
class InvalidState : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Experiment or scenario configuration that cannot be run.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File or stream could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message)
{
    if (!condition) {
        throw InvalidArgument(message);
    }
}

} // namespace prs
