#pragma once
#include <stdexcept>
#include <string>

namespace mspnet {

// Bad shapes or op misuse (programming/usage errors).
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Out-of-range parameter values (keep_prob, ratios, ...).
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Unreadable/inconsistent input data (files, labels, manifests).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (divergence).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mspnet
