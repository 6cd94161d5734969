#pragma once

#include <stdexcept>
#include <string>

namespace mathmoe {

// Shape or dimension mismatch between tensor operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or otherwise numerically invalid state.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument values (empty input, bad range, unknown id, ...).
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Record fails a documented invariant; carries location info when known.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content (JSON syntax, missing fields).
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration (duplicate task names, missing keys, conflicting options).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// LLM transport failure after exhausting the retry policy.
struct ClientError : std::runtime_error {
  explicit ClientError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mathmoe
