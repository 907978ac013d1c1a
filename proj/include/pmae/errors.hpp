#pragma once

#include <stdexcept>
#include <string>

namespace pmae {

// Base error for everything raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes incompatible with the requested operation.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A computation produced NaN or Inf, or non-finite data was handed in.
class NonFiniteError : public Error {
public:
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

// An iterative routine failed to converge within its budget.
class ConvergenceError : public Error {
public:
    explicit ConvergenceError(const std::string& msg) : Error(msg) {}
};

// File format / filesystem problems.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration (CLI flags, config files, run setup).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace pmae
