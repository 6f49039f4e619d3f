#pragma once

#include <stdexcept>
#include <string>

namespace synref {

// Error taxonomy shared across the library. The CLI maps UsageError to exit
// code 2 and every other Error subclass to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid numeric domain: log of a nonpositive value, non-finite results,
/// normalization of a zero vector, boxes covering no cells, and similar.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse: backward without a tape, reusing a consumed tape, stepping a
/// parameter that has no gradient.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Scene or expression generation exhausted its retry budget.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Vocabulary mismatch between a trained model and a dataset.
class VocabError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file contents (dataset headers, checkpoints).
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Bad command line arguments or unknown configuration keys.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace synref
