#pragma once

#include <stdexcept>
#include <string>

namespace qgpt {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes of operands do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// An integer id lies outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by a forward computation.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

// A tensor whose scale is zero where a positive scale is required
// (all-zero weights, zero-norm representations).
class DegenerateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Unknown module or parameter name.
class NameError : public Error {
public:
    using Error::Error;
};

// Checkpoint bytes failed structural or CRC validation.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class UnsupportedVersionError : public IntegrityError {
public:
    using IntegrityError::IntegrityError;
};

// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

// Bit packing received a code that does not fit its storage width.
class EncodingError : public Error {
public:
    using Error::Error;
};

// A training run hit a non-finite loss; `step` is the failing step index.
class TrainingAborted : public Error {
public:
    TrainingAborted(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

}  // namespace qgpt
