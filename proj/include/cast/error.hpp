#pragma once

#include <stdexcept>
#include <string>

namespace cast {

// Exit-code class of an error, used by the command-line runner.
enum class ErrorKind { usage = 2, data = 3, incomplete = 4 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ErrorKind kind = ErrorKind::usage)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Malformed input file (wrong column count, bad header, ...).
class SchemaError : public Error {
 public:
  SchemaError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")", ErrorKind::data), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Dangling id: an event not present in the registry, a token id out of range.
class ReferenceError : public Error {
 public:
  explicit ReferenceError(const std::string& what) : Error(what, ErrorKind::data) {}
};

class DecodeError : public Error {
 public:
  explicit DecodeError(const std::string& what) : Error(what, ErrorKind::data) {}
};

class LabelError : public Error {
 public:
  explicit LabelError(const std::string& what) : Error(what, ErrorKind::data) {}
};

class PlanError : public Error {
 public:
  explicit PlanError(const std::string& what) : Error(what, ErrorKind::usage) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ErrorKind::usage) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what) : Error(what) {}
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(what, ErrorKind::data) {}
};

class CompatibilityError : public Error {
 public:
  explicit CompatibilityError(const std::string& what) : Error(what, ErrorKind::usage) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ErrorKind::data) {}
};

}  // namespace cast
