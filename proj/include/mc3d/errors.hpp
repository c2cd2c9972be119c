#pragma once

#include <stdexcept>
#include <string>

namespace mc3d {

// Error taxonomy shared by the library and the CLI exit-code mapping:
//   ConfigError  -> exit 1 (usage, contracts, configuration)
//   NumericError -> exit 2 (non-finite values, failed numeric checks)
//   FormatError  -> exit 3 (file I/O, container/checkpoint format)
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : ConfigError {
    using ConfigError::ConfigError;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mc3d
