#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lpf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on an argument value was violated (out-of-range id, negative gamma, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file contents. line() is 1-based, 0 when not tied to a line.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A loss or activation became NaN/Inf during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace lpf
