#pragma once

#include <stdexcept>
#include <string>

namespace fsm {

/// Invalid input or a violated precondition of a design/analysis routine.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical singularity detected by a factorization.
class SingularMatrixError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Malformed external input (CSV cells, ragged rows, bad headers).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fsm
