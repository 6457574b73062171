#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hsiseg {

// Base of every library error. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated file. `offset` is the byte position where parsing
// stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Mathematically undefined input, e.g. the angle of a zero spectrum.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsiseg
