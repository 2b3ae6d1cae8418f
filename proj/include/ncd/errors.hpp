#pragma once

#include <stdexcept>
#include <string>

namespace ncd {

// Exit-code contract: 0 ok, 2 config, 3 data, 4 numeric.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct BadMagicError : DataError {
    explicit BadMagicError(const std::string& msg) : DataError(msg) {}
};
struct BadCrcError : DataError {
    explicit BadCrcError(const std::string& msg) : DataError(msg) {}
};
struct TruncatedError : DataError {
    explicit TruncatedError(const std::string& msg) : DataError(msg) {}
};
struct VersionError : DataError {
    explicit VersionError(const std::string& msg) : DataError(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ncd
