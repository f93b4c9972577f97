#pragma once

#include <stdexcept>
#include <string>

namespace dvit {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct NotScalar : Error {
    using Error::Error;
};

struct InvalidTarget : Error {
    using Error::Error;
};

struct InvalidTemperature : Error {
    using Error::Error;
};

struct InvalidGrid : Error {
    using Error::Error;
};

struct NoValidPixels : Error {
    using Error::Error;
};

struct EmptyAccumulator : Error {
    using Error::Error;
};

struct CorruptCheckpoint : Error {
    using Error::Error;
};

struct VersionMismatch : Error {
    using Error::Error;
};

struct IncompatibleCheckpoint : Error {
    using Error::Error;
};

struct EmptyDataset : Error {
    using Error::Error;
};

struct DecodeError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace dvit
