#pragma once

#include <stdexcept>
#include <string>

namespace safectrl {

// Shape or dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaped into a value that must stay finite.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller violated an API precondition (wrong call order, missing grads, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration, malformed input file, unknown key.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required checkpoint or artifact is absent.
struct MissingDependencyError : std::runtime_error {
    explicit MissingDependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace safectrl
