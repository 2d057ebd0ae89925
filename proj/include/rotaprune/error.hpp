#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rotaprune {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Input rejected by a precondition (negative score, non-orthogonal rotation, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// The arithmetic broke down: rank deficiency, indefinite matrix, non-finite value.
class NumericalError : public Error {
public:
    using Error::Error;
};

class RankDeficientError : public NumericalError {
public:
    RankDeficientError(std::size_t column, double pivot)
        : NumericalError("qr: rank-deficient input at column " + std::to_string(column) +
                         " (|r_jj| = " + std::to_string(pivot) + ")"),
          column_(column) {}
    std::size_t column() const { return column_; }

private:
    std::size_t column_;
};

class NotPositiveDefiniteError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// Operation used in a way the state machine does not allow (double fuse, double merge,
// accumulating into sealed statistics).
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace rotaprune
