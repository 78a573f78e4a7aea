#pragma once

#include <stdexcept>
#include <string>

namespace slog {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dimension or shape mismatch between arrays.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (tokens, files, datasets).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was requested before the stage it depends on.
class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

/// Emits a warning line on stderr. Silenced by set_warnings_enabled(false).
void warn(const std::string& message);
void set_warnings_enabled(bool enabled);

}  // namespace slog
