#pragma once

#include <stdexcept>
#include <string>

namespace iaekf {

/// Non-finite or out-of-domain input to a math primitive.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A covariance block failed its symmetric positive-definite check.
class InvalidCovariance : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Ill-conditioned or singular system encountered inside a filter, smoother or EM step.
class NumericalDegeneracy : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad configuration value or file.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace iaekf
