#pragma once

#include <stdexcept>
#include <string>

namespace crackseg {

/// Base of every error the engine raises. `exit_code()` is the stable CLI code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

/// Shape mismatch, non-finite values, malformed labels.
class RejectedInput : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class IngestionError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class EvaluationError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& msg, std::string key = {})
        : Error(msg), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }
    int exit_code() const noexcept override { return 4; }

private:
    std::string key_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 5; }
};

}  // namespace crackseg
