// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace goat {

// Error taxonomy shared by library and CLI. The CLI maps these to exit
// codes: ArgumentError -> 2, DependencyError -> 3, DataError -> 4.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A prerequisite artifact (checkpoint, codebook, data file) is missing.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input data or file contents.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operation invoked in an invalid object state (e.g. push after finalize).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace goat
