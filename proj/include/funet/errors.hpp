#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace funet {

// Each error category maps onto one CLI exit code (see cli.hpp).

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    ShapeError(const std::string& op, const std::string& dimension, std::size_t expected,
               std::size_t actual)
        : Error(op + ": shape mismatch in " + dimension + " (expected " + std::to_string(expected) +
                ", got " + std::to_string(actual) + ")"),
          dimension_(dimension) {}

    ShapeError(const std::string& op, const std::string& dimension, const std::string& detail)
        : Error(op + ": bad " + dimension + ": " + detail), dimension_(dimension) {}

    const std::string& dimension() const noexcept { return dimension_; }

private:
    std::string dimension_;
};

struct DomainError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct GenerationError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

}  // namespace funet
