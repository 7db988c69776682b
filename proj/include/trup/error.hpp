#pragma once

#include <stdexcept>
#include <string>

namespace trup {

/// Base of every error raised by the library. The CLI maps all of these to
/// exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes or invalid axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file header or payload (TRUP1, PPM, PGM, key=value).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent dataset contents, e.g. an image/mask size mismatch.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint bundle does not match the model it is loaded into.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace trup
