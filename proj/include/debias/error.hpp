// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace debias {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination; the message names the field.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Step index (or other index) outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Mismatched batch, vector or parameter dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Operation called in the wrong state, e.g. backward before forward.
class StateError : public Error {
public:
    using Error::Error;
};

/// Non-finite value or division guard hit during a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Checkpoint could not be read; the message names the offending field.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Metric evaluated on invalid inputs (empty sets, mismatched dims).
class MetricError : public Error {
public:
    using Error::Error;
};

/// Bad command line or config file: unknown key, malformed value.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace debias
