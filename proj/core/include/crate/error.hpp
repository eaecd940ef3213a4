#pragma once

#include <stdexcept>
#include <string>

namespace crate {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user input: bad shapes, flags, config keys, file contents.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class FormatError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class EmptyClass : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class UnregisteredPrimitive : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Numerical failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateColumn : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DivergedLoss : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NormalizationViolated : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace crate
