#pragma once

#include <stdexcept>
#include <string>

namespace pcomp {

// Root of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad run configuration or invalid user-supplied data (grid files, marker
// files, layer lists). The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A grid/marker/config value violates one of its invariants. `field` names the
// offending entry so messages point at the right place in the file.
class ValidationError : public ConfigError {
 public:
  ValidationError(std::string field, const std::string& what)
      : ConfigError(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Model loading or forward-pass failures. The CLI maps this to exit code 3.
class BackendError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public BackendError {
 public:
  using BackendError::BackendError;
};

// Caller passed an argument outside the operation's contract (site out of
// range, vector length mismatch, unknown id).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace pcomp
