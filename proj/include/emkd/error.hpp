#pragma once

#include <stdexcept>
#include <string>

namespace emkd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents or operand ranks do not fit the operation.
struct ShapeError : Error {
    using Error::Error;
};

// A scalar parameter (stride, pool size, exponent, ...) is out of range.
struct ValueError : Error {
    using Error::Error;
};

// A run configuration is inconsistent (bad key, non-integer rescale, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Input data violates a contract (class id out of range, empty split, ...).
struct DataError : Error {
    using Error::Error;
};

// A serialized file is malformed; the message names the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// No spatially compatible feature taps between two networks.
struct PairingError : Error {
    using Error::Error;
};

// A metric is undefined for the given volumes (e.g. empty reference).
struct MetricError : Error {
    using Error::Error;
};

}  // namespace emkd
