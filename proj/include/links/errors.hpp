#pragma once

#include <stdexcept>
#include <string>

namespace links {

/// Bad or missing configuration: unknown flags, missing checkpoints, invalid ranges.
struct ConfigError : std::runtime_error {
   using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data.
struct DataError : std::runtime_error {
   using std::runtime_error::runtime_error;
};

/// A loss or intermediate quantity became non-finite during training.
struct DivergenceError : std::runtime_error {
   using std::runtime_error::runtime_error;
};

} // namespace links
