#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dsmd {

// Base for every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class ZeroVectorError : public Error {
 public:
  explicit ZeroVectorError(std::size_t row)
      : Error("row " + std::to_string(row) + " has (near) zero norm"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

}  // namespace dsmd
