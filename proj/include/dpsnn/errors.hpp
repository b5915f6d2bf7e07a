#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dpsnn {

/// Invalid configuration or mismatched shapes.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced or received a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or run-directory failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed spike file. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { header, payload, labels };

  FormatError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

}  // namespace dpsnn
