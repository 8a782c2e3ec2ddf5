// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ctrlfuse {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand extents are incompatible with the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API precondition that is not about shapes.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration (generator size, training flags, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A persisted file or wire payload could not be parsed.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Checkpoint written by an unsupported format version.
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Optimisation diverged (non-finite loss).
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace ctrlfuse
