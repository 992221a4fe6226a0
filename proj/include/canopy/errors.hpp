#pragma once

#include <stdexcept>
#include <string>

namespace canopy {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed on-disk input (header, payload, CSV).
class InputFormatError : public Error {
public:
    explicit InputFormatError(const std::string& msg) : Error(msg) {}
};

class PayloadLengthError : public InputFormatError {
public:
    explicit PayloadLengthError(const std::string& msg) : InputFormatError(msg) {}
};

class UnknownDtypeError : public InputFormatError {
public:
    explicit UnknownDtypeError(const std::string& msg) : InputFormatError(msg) {}
};

class MisalignmentError : public Error {
public:
    MisalignmentError(const std::string& msg, std::size_t index, std::string field)
        : Error(msg), index_(index), field_(std::move(field)) {}
    std::size_t index() const { return index_; }
    const std::string& field() const { return field_; }

private:
    std::size_t index_;
    std::string field_;
};

class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

class InsufficientDataError : public Error {
public:
    explicit InsufficientDataError(const std::string& msg) : Error(msg) {}
};

class FitError : public Error {
public:
    explicit FitError(const std::string& msg) : Error(msg) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Broken internal contract (e.g. wrong feature stack layout).
class ConsistencyError : public Error {
public:
    explicit ConsistencyError(const std::string& msg) : Error(msg) {}
};

} // namespace canopy
