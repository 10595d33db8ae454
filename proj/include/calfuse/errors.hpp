#pragma once

#include <stdexcept>
#include <string>

namespace calfuse {

/// Precondition or shape violation in a caller-supplied value.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameter (e.g. non-positive temperature).
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Malformed file contents (bad magic, truncation, bad version).
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Filesystem failure (cannot open, read, or write).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace calfuse
