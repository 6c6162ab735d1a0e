#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dehazeflow {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the domain an operation accepts.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph (foreign variables, backward on a disconnected loss, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared while integrating the flow or training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& where, std::size_t step)
      : Error(where + ": non-finite value at step " + std::to_string(step)), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// File could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// File contents are malformed, unsupported, or from an incompatible version.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace dehazeflow
