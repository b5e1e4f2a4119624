#pragma once

#include <stdexcept>
#include <string>

namespace affectnet {

// Bad input: shapes, labels, files, config. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Parse failure with file/line context already folded into what().
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& msg)
      : ValidationError(file + ":" + std::to_string(line) + ": " + msg), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// NaN/Inf, divergence. Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace affectnet
