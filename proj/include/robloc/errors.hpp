#pragma once

#include <stdexcept>
#include <string>

namespace robloc {

// Error taxonomy. The CLI maps each kind to a distinct exit code.
enum class ErrorKind { config, data, geometry, divergence, internal };

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::geometry: return "geometry";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::internal: return "internal";
  }
  return "internal";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid user configuration. `path` names the offending field, e.g. "nlos.probability".
class ConfigError : public Error {
 public:
  ConfigError(const std::string& path, const std::string& msg)
      : Error(ErrorKind::config, path.empty() ? msg : path + ": " + msg), path_(path), message_(msg) {}
  const std::string& path() const noexcept { return path_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string path_;
  std::string message_;
};

/// Malformed input file. `line` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& msg)
      : Error(ErrorKind::data, file + (line ? ":" + std::to_string(line) : std::string()) + ": " + msg),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(ErrorKind::data, msg) {}
};

/// Coincident points, zero-norm reference frames, rank-deficient normal equations.
class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& msg) : Error(ErrorKind::geometry, msg) {}
};

/// Non-finite cost or a state that left the physically valid region.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& msg) : Error(ErrorKind::divergence, msg) {}
};

}  // namespace robloc
