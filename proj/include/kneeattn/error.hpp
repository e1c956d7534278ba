#pragma once

#include <stdexcept>
#include <string>

namespace kneeattn {

/// Base class for every error thrown by the library. `kind()` is a short
/// machine-readable tag used by the CLI when it emits error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// Precondition violated by the caller (shape mismatch, bad argument).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error("contract_violation", what) {}
};

/// Malformed or inconsistent input data.
class IngestError : public Error {
public:
    explicit IngestError(const std::string& what) : Error("ingest_error", what) {}
};

/// Double Bacon-Watts fit failed for one cell.
class LabelError : public Error {
public:
    explicit LabelError(const std::string& what) : Error("labeling_error", what) {}
};

/// Invalid model / run configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("configuration_error", what) {}
};

/// Requested attention scores are not produced by the architecture.
class NotAvailableError : public Error {
public:
    explicit NotAvailableError(const std::string& what) : Error("not_available", what) {}
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw ContractError(message);
}

}  // namespace kneeattn
