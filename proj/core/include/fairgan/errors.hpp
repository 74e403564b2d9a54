#pragma once

#include <stdexcept>
#include <string>

namespace fairgan {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inconsistent dimensions, invalid option values, contradictory settings.
struct ConfigError : Error {
    using Error::Error;
};

// API misuse: calling an operation when its preconditions do not hold.
struct UsageError : Error {
    using Error::Error;
};

// NaN/Inf or other numerical breakdown; names the offending operation.
struct NumericalError : Error {
    using Error::Error;
};

// Malformed or truncated files (FGDS / FGCK / FGLZ / CIFAR-10 / config).
struct FormatError : Error {
    using Error::Error;
};

// Requests that exceed the available data.
struct DataError : Error {
    using Error::Error;
};

// Latent-space search could not find enough samples of a class.
struct ScarcityError : Error {
    using Error::Error;
};

// Trained component fell below a required quality floor.
struct QualityError : Error {
    using Error::Error;
};

}  // namespace fairgan
