#pragma once

#include <stdexcept>
#include <string>

namespace cainn {

// Root of every error the library throws. The CLI maps the concrete
// subclasses onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on arguments was violated (bad permutation, empty input, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk container. Subclasses let callers tell the failure apart.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class MagicMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace cainn
