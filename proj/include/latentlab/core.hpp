#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace latentlab {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  DimensionMismatch(const std::string& what, Eigen::Index expected, Eigen::Index actual)
      : Error(what + ": expected dimension " + std::to_string(expected) + ", got " +
              std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  Eigen::Index expected() const noexcept { return expected_; }
  Eigen::Index actual() const noexcept { return actual_; }

 private:
  Eigen::Index expected_;
  Eigen::Index actual_;
};

/// Raised when a Cholesky factorization breaks down; `pivot()` is the
/// zero-based index of the first non-positive pivot.
class NotPositiveDefinite : public Error {
 public:
  NotPositiveDefinite(const std::string& what, Eigen::Index pivot)
      : Error(what + ": matrix is not positive definite (Cholesky failed at pivot " +
              std::to_string(pivot) + ")"),
        pivot_(pivot) {}

  Eigen::Index pivot() const noexcept { return pivot_; }

 private:
  Eigen::Index pivot_;
};

class NonFinite : public Error {
 public:
  using Error::Error;
};

inline void check_dim(const char* what, Eigen::Index expected, Eigen::Index actual) {
  if (expected != actual) throw DimensionMismatch(what, expected, actual);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace latentlab
