#pragma once

#include <stdexcept>
#include <string>

namespace cvt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration (unknown dataset, bad split, bad flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shapes or indices that do not fit together.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Numerical precondition violated by the caller (e.g. non-unit embeddings).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite objective; `component()` names the culprit.
class TrainingAbort : public Error {
 public:
  TrainingAbort(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace cvt
