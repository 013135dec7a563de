#pragma once

#include <stdexcept>
#include <string>

namespace pixnerd {

// Contract violations: shapes or arguments that break a documented precondition.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract violation: " + msg) {}
};

// Values outside their mathematical domain (t outside [0,1], invalid label index, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

// Patch/image geometry that does not tile (indivisible resolutions).
struct GeometryError : std::runtime_error {
    explicit GeometryError(const std::string& msg) : std::runtime_error("geometry error: " + msg) {}
};

// Non-finite values surfaced instead of silently propagated.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// File and serialization failures, including checkpoint rejects.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace pixnerd
