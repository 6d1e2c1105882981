#pragma once

#include <stdexcept>
#include <string>

namespace qsde {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments: wrong shapes, non-finite entries, out-of-range indices.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class NotPsd : public Error {
 public:
  using Error::Error;
};

class Singular : public Error {
 public:
  using Error::Error;
};

/// A declared bound or a modelling assumption does not hold.
class BoundViolation : public Error {
 public:
  using Error::Error;
};

/// No parameter set satisfies the preconditions of an estimation plan.
class Infeasible : public Error {
 public:
  using Error::Error;
};

/// Bad configuration document or command-line value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace qsde
