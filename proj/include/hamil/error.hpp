#pragma once

#include <stdexcept>
#include <string>

namespace hamil {

/// Base for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared at an operation boundary.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The Jacobi eigensolver hit its sweep cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double matrix_norm)
      : Error(what), matrix_norm_(matrix_norm) {}
  double matrix_norm() const { return matrix_norm_; }

 private:
  double matrix_norm_;
};

/// Ground state is (near-)degenerate, so psi0 is not differentiable.
class DegenerateError : public Error {
 public:
  DegenerateError(const std::string& what, double gap) : Error(what), gap_(gap) {}
  double gap() const { return gap_; }

 private:
  double gap_;
};

/// Invalid arguments or configuration supplied by a caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace hamil
