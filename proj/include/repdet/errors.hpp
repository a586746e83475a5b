#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace repdet {

// All library failures derive from Error so callers (the CLI in particular)
// can map families of errors onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration value violates its contract (divisibility, sizes, ranges).
class SpecError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object in the wrong mode.
class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class FusionError : public Error {
 public:
  using Error::Error;
};

// Bad bytes in a binary or text container. Carries the byte offset (or line)
// at which decoding gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  // Same failure, message prefixed with where the bytes came from.
  FormatError(const std::string& source, const FormatError& inner)
      : Error(source + ": " + inner.what()), offset_(inner.offset_) {}
  // Text formats: "<file>:<line>: <what>", offset() is the 1-based line.
  static FormatError at_line(const std::string& file, std::size_t line, const std::string& what) {
    return FormatError(file + ":" + std::to_string(line) + ": " + what, line, Line{});
  }
  std::size_t offset() const noexcept { return offset_; }

 private:
  struct Line {};
  FormatError(const std::string& what, std::size_t line, Line) : Error(what), offset_(line) {}
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Inputs parsed fine but are inconsistent with the model or dataset.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace repdet
