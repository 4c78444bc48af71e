#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace swintext {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, loss or schedule configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// API misuse, e.g. backward on a non-scalar or an empty prompt.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A prompt could not be mapped to a text embedding.
class ResolutionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace swintext
