#ifndef VOLAGE_ERRORS_HPP
#define VOLAGE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace volage {

// Each error family maps onto one CLI exit code (see tools/volage.cpp).

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CorruptArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// backward() called with a cache whose forward no longer matches the model.
struct StaleCacheError : std::logic_error {
  using std::logic_error::logic_error;
};

// File-format problems. Subclasses name the specific failure.
struct FormatError : IoError {
  using IoError::IoError;
};
struct BadMagicError : FormatError {
  using FormatError::FormatError;
};
struct UnsupportedDatatypeError : FormatError {
  using FormatError::FormatError;
};
struct TruncatedDataError : FormatError {
  using FormatError::FormatError;
};

}  // namespace volage

#endif  // VOLAGE_ERRORS_HPP
