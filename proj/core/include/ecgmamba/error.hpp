#pragma once

#include <stdexcept>
#include <string>

namespace ecgmamba {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Violated calling contract (e.g. backward from a non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file header or content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File shorter than its header promises.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Sample rate that cannot be reached by integer decimation.
class UnsupportedRateError : public Error {
 public:
  using Error::Error;
};

/// A metric that is undefined for the given inputs (e.g. AUC with no valid class).
class MetricUndefinedError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf observed while checked mode is active.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace ecgmamba
