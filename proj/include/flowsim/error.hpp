#pragma once

#include <stdexcept>
#include <string>

namespace flowsim {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file (JSON syntax, missing keys, wrong types).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Well-formed input that violates a model invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Inconsistent scenario, training, or sweep configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Numerical failure (non-finite loss, diverging optimizer).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace flowsim
