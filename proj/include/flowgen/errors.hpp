#pragma once

#include <stdexcept>
#include <string>

namespace flowgen {

/// Shape or dimension disagreement between operands.
class DimError : public std::runtime_error {
public:
    explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

/// A documented precondition was violated by the caller.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

/// Malformed or inconsistent on-disk data.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

/// Non-finite values or other numeric breakdown.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

/// Invalid experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// A required artifact from an earlier pipeline stage is missing (CLI exit code 3).
class MissingArtifactError : public std::runtime_error {
public:
    explicit MissingArtifactError(const std::string& msg)
        : std::runtime_error("missing artifact: " + msg) {}
};

} // namespace flowgen
