#pragma once

#include <stdexcept>
#include <string>

namespace vampnet {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch (non-square input, incompatible batch widths, ...).
struct DimensionError : Error {
    using Error::Error;
};

/// Value precondition violated (negative distance, asymmetric matrix, ...).
struct DomainError : Error {
    using Error::Error;
};

/// Iterative numerics failed: non-convergence or non-finite state.
struct NumericalError : Error {
    using Error::Error;
};

/// Every retained direction was truncated away.
struct RankError : Error {
    using Error::Error;
};

/// Degenerate or empty dataset (no pairs, empty split, ...).
struct DataError : Error {
    using Error::Error;
};

/// Malformed file content.
struct ParseError : Error {
    using Error::Error;
};

/// Filesystem failure (missing file, unwritable path).
struct IoError : Error {
    using Error::Error;
};

/// Bad experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace vampnet
