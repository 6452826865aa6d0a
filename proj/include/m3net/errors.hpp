#pragma once

#include <stdexcept>
#include <string>

namespace m3net {

// Shape or argument mismatch between tensors / configs.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// NaN/Inf produced, iteration failed to converge, or a numeric contract broke.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or missing file content (bad magic, truncation, schema violation).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or contradictory run configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace m3net
