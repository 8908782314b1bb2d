#pragma once

#include <stdexcept>
#include <string>

namespace mia {

// Root of every error the library raises. Callers that only care about
// "something in mia failed" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

// Violated precondition of an operation (bad variant, repeated backward, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

// NaN or Inf detected by a validation pass.
class NumericError : public Error {
public:
  using Error::Error;
};

// Visual and textual matrices disagree on row count.
class AlignmentError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Malformed bytes: bad magic, inconsistent header fields, broken JSON block.
class FormatError : public Error {
public:
  using Error::Error;
};

class TruncatedError : public FormatError {
public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

class VocabMismatchError : public Error {
public:
  using Error::Error;
};

} // namespace mia
