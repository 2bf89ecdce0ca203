#pragma once

#include <stdexcept>
#include <string>

namespace multilane {

// Base class for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis violation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (geometry, hyperparameters, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed archive, missing entry or shape mismatch against a config.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Data integrity violation (overlapping class ids, class-count mismatch).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Incremental-protocol misuse, e.g. retraining a completed task.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API contract (non-scalar loss, empty tape).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace multilane
