#pragma once

#include <stdexcept>
#include <string>

namespace dsm {

// Bad or inconsistent configuration (CLI exit code 3).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or malformed input data (CLI exit code 4).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dsm
