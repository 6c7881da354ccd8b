#pragma once

#include <stdexcept>
#include <string>

namespace calibra {

// Broad failure category; maps one-to-one onto the CLI exit codes.
enum class ErrorKind {
    config = 1,
    backend = 2,
    data = 3,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class BackendError : public Error {
public:
    explicit BackendError(const std::string& what, bool retryable = false)
        : Error(ErrorKind::backend, what), retryable_(retryable) {}

    [[nodiscard]] bool retryable() const noexcept { return retryable_; }

private:
    bool retryable_;
};

/// Connection-level failure or 5xx from the server. Retried.
class TransportError : public BackendError {
public:
    explicit TransportError(const std::string& what) : BackendError(what, true) {}
};

/// HTTP 429. Retried.
class RateLimitError : public BackendError {
public:
    explicit RateLimitError(const std::string& what) : BackendError(what, true) {}
};

/// Response body does not have the expected shape. Never retried.
class MalformedResponseError : public BackendError {
public:
    explicit MalformedResponseError(const std::string& what) : BackendError(what, false) {}
};

/// The backend cannot provide something the run needs (e.g. logprobs).
class CapabilityError : public BackendError {
public:
    explicit CapabilityError(const std::string& what) : BackendError(what, false) {}
};

/// Confidence could not be read off a completion.
class ExtractionError : public DataError {
public:
    explicit ExtractionError(const std::string& what) : DataError(what) {}
};

}  // namespace calibra
