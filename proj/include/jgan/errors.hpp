#pragma once

#include <stdexcept>
#include <string>

namespace jgan {

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CorruptLabelError : std::runtime_error {
  explicit CorruptLabelError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ChecksumError : std::runtime_error {
  explicit ChecksumError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace jgan
