#pragma once

#include <stdexcept>
#include <string>

namespace mpt {

// Error taxonomy shared by every module. The CLI maps each kind onto a
// stable process exit code (see tools/mpt.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside its valid range (targets, states, item ids).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or infeasible combination of values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Sequence longer than the model supports.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (dataset, embeddings).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint missing, corrupt, or incompatible.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class MissingFileError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Non-finite value produced by an operation or optimizer step.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; the last good checkpoint (if any) was kept on disk.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar tensor.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpt
