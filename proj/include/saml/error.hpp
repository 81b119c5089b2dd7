#pragma once

#include <stdexcept>
#include <string>

namespace saml {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad inputs: shapes, indices, config values, file formats, stage ordering.
// The CLI maps these to exit code 2.
struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

struct IndexError : ValidationError {
    using ValidationError::ValidationError;
};

// Malformed serialized data: checkpoints, packed codes.
struct FormatError : ValidationError {
    using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

// NaN or Inf where finite values are required. The CLI maps these to exit code 3.
struct NumericError : Error {
    using Error::Error;
};

} // namespace saml
