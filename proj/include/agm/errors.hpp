#pragma once

#include <stdexcept>
#include <string>

namespace agm {

// Root of every error the library raises on purpose. The CLI maps the
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model's position table.
class LengthError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Token id outside the vocabulary.
class VocabularyError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input files, checkpoint/config mismatches.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API contract (e.g. a non-differentiable attribution
// handed to the mask loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses or parameters. `diagnostics` carries whatever the raiser
// knew at the time (loss components, step index).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::string diagnostics)
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  explicit NumericError(const std::string& what) : Error(what) {}
  const std::string& diagnostics() const { return diagnostics_; }

 private:
  std::string diagnostics_;
};

// A quantity that has no value for the given inputs (zero-variance Pearson,
// cosine against a zero vector, empty shared support).
class UndefinedError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace agm
