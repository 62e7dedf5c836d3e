#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nowcast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated (shape, range, ordering...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A radar frame holds a negative or non-finite rate.
class InvalidFrame : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated binary/text artifact. Carries the byte offset
/// (or line number for text formats) where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Evaluation set where a metric is undefined (e.g. no positive pixels).
class DegenerateSet : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or artifact produced under a different configuration.
class ConfigMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace nowcast
