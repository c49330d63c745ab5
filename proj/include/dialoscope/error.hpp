#pragma once

#include <stdexcept>
#include <string>

namespace dialoscope {

/// Base of every error the library raises. The subclasses map onto the
/// CLI exit codes: ConfigError -> 1, BackendError -> 2, DataError -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent input data (datasets, fixtures, stores).
class DataError : public Error {
public:
    using Error::Error;
};

class BackendError : public Error {
public:
    using Error::Error;
};

/// Connection failures and timeouts that persisted through all retries.
class TransportError : public BackendError {
public:
    using BackendError::BackendError;
};

/// The server answered, but not with a usable 2xx completion.
class ProtocolError : public BackendError {
public:
    ProtocolError(int status, const std::string& message)
        : BackendError(message), status_(status) {}

    int status() const noexcept { return status_; }

private:
    int status_;
};

/// The backend cannot serve the request as asked (missing logprobs,
/// prompt absent from a replay fixture, ...).
class CapabilityError : public BackendError {
public:
    using BackendError::BackendError;
};

/// Correlation requested over a constant series.
class UndefinedCorrelation : public Error {
public:
    using Error::Error;
};

}  // namespace dialoscope
