#pragma once

#include <stdexcept>
#include <string>

namespace dtk {

/// Base of every error the library throws. `kind()` is a stable tag used in
/// the CLI's machine-readable error output.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error("shape_error", m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& m) : Error("contract_error", m) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& m) : Error("format_error", m) {}
};

class IngestError : public Error {
public:
    explicit IngestError(const std::string& m) : Error("ingestion_error", m) {}
};

class SpecError : public Error {
public:
    explicit SpecError(const std::string& m) : Error("spec_error", m) {}
};

class SubsetError : public Error {
public:
    explicit SubsetError(const std::string& m) : Error("subset_error", m) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

}  // namespace dtk
