#pragma once

#include <stdexcept>
#include <string>

namespace saoc {

// Error taxonomy shared across the library. Everything derives from
// std::runtime_error so callers can catch coarsely; the CLI maps any
// saoc exception to exit code 2.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated precondition or API misuse (non-scalar loss, empty cloud, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Geometry that cannot be processed (coincident points, empty surface, ...).
struct DegenerateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace saoc
