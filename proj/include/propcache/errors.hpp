#pragma once

#include <stdexcept>
#include <string>

namespace propcache {

// Every failure the library reports derives from Error. The CLI maps the
// three families below onto exit codes 2 (argument), 3 (data/format) and
// 4 (numeric).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// tensorcore
class ShapeMismatch : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};
class DegenerateVector : public NumericError {
 public:
  using NumericError::NumericError;
};
class NonScalarLoss : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// datastore
class FormatError : public DataError {
 public:
  using DataError::DataError;
};
class ShapeHeaderMismatch : public DataError {
 public:
  using DataError::DataError;
};
class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

// Carries the name of the first violated invariant (e.g. "unit-norm", "shots").
class ValidationError : public DataError {
 public:
  ValidationError(std::string invariant, const std::string& detail)
      : DataError(invariant + ": " + detail), invariant_(std::move(invariant)) {}
  const std::string& invariant() const noexcept { return invariant_; }

 private:
  std::string invariant_;
};

// propmine
class EmptyClass : public DataError {
 public:
  using DataError::DataError;
};
class EmptyInput : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};
class NoPositives : public DataError {
 public:
  using DataError::DataError;
};

// cache
class DegeneratePrototype : public NumericError {
 public:
  using NumericError::NumericError;
};

// training
class NonFiniteLoss : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace propcache
