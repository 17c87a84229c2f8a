#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace megan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform. The message names the operation and both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint failures are distinguished so callers can tell a stale file from a damaged one.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Generation ran past the model context; `partial` holds the tokens produced so far.
class ContextOverflowError : public Error {
 public:
  ContextOverflowError(const std::string& what, std::vector<int> partial)
      : Error(what), partial(std::move(partial)) {}
  std::vector<int> partial;
};

/// Training loss became NaN or Inf.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace megan
