#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace neuronscope {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid model dimensions or malformed run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A token sequence does not fit the model's context window, or is too short.
class LengthError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Request would exceed a memory bound; the message says what to shrink.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

class BundleError : public Error {
 public:
  enum class Kind { io, malformed_header, shape_mismatch, truncated };

  BundleError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Schema violation in an input file. line is 1-based, 0 when not line oriented.
class DataError : public Error {
 public:
  DataError(const std::string& what, std::size_t line = 0, std::string field = {})
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line),
        field_(std::move(field)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// Completion service unreachable or returned garbage after all retries.
class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace neuronscope
