#pragma once

#include <stdexcept>
#include <string>

namespace rmm {

// Bad input: invalid parameters, unknown preset, malformed config. CLI exit 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A specialization was requested for parameters outside its domain.
class PreconditionError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// Solver or simulation failure. CLI exit 1.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularSystemError : public NumericalError {
public:
    SingularSystemError(const std::string& what, double condition)
        : NumericalError(what), condition_(condition) {}
    double condition() const { return condition_; }

private:
    double condition_;
};

class BlowUpError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

} // namespace rmm
