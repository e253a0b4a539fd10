#pragma once

#include "latentlab/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace latentlab {

/// Returns (A + A^T) / 2, rejecting inputs whose asymmetry exceeds
/// `tol * max(1, max|a_ij|)`.
template <typename Derived>
Matrix<typename Derived::Scalar> symmetrize_checked(const Eigen::MatrixBase<Derived>& a,
                                                    const char* what = "symmetrize",
                                                    double tol = 1e-9) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() != a.cols()) throw DimensionMismatch(std::string(what) + ": square matrix", a.rows(), a.cols());
  const Scalar scale = std::max<Scalar>(Scalar(1), a.cwiseAbs().maxCoeff());
  const Scalar asym = a.rows() == 0 ? Scalar(0) : (a - a.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= Scalar(tol) * scale))
    throw InvalidArgument(std::string(what) + ": matrix is not symmetric (max asymmetry " +
                          std::to_string(static_cast<double>(asym)) + ")");
  return (a + a.transpose()) / Scalar(2);
}

/// Lower Cholesky factor A = L L^T that reports the failing pivot.
template <typename Scalar>
class Cholesky {
 public:
  Cholesky() = default;

  /// Factorizes `a + ridge * I`. `a` is symmetrized first.
  template <typename Derived>
  explicit Cholesky(const Eigen::MatrixBase<Derived>& a, const char* what = "cholesky",
                    Scalar ridge = Scalar(0)) {
    Matrix<Scalar> s = symmetrize_checked(a, what);
    const Eigen::Index k = s.rows();
    if (ridge != Scalar(0)) s.diagonal().array() += ridge;
    l_ = Matrix<Scalar>::Zero(k, k);
    for (Eigen::Index j = 0; j < k; ++j) {
      Scalar diag = s(j, j) - l_.row(j).head(j).squaredNorm();
      if (!(diag > Scalar(0)) || !std::isfinite(static_cast<double>(diag)))
        throw NotPositiveDefinite(what, j);
      const Scalar ljj = std::sqrt(diag);
      l_(j, j) = ljj;
      for (Eigen::Index i = j + 1; i < k; ++i)
        l_(i, j) = (s(i, j) - l_.row(i).head(j).dot(l_.row(j).head(j))) / ljj;
    }
  }

  Eigen::Index size() const { return l_.rows(); }
  const Matrix<Scalar>& matrix_l() const { return l_; }

  Scalar log_det() const { return Scalar(2) * l_.diagonal().array().log().sum(); }

  /// L^{-1} b.
  template <typename Derived>
  Matrix<Scalar> solve_lower(const Eigen::MatrixBase<Derived>& b) const {
    return l_.template triangularView<Eigen::Lower>().solve(b);
  }

  /// A^{-1} b.
  template <typename Derived>
  Matrix<Scalar> solve(const Eigen::MatrixBase<Derived>& b) const {
    Matrix<Scalar> y = solve_lower(b);
    return l_.transpose().template triangularView<Eigen::Upper>().solve(y);
  }

  Matrix<Scalar> inverse() const {
    return solve(Matrix<Scalar>::Identity(size(), size()));
  }

  /// v^T A^{-1} v.
  template <typename Derived>
  Scalar quad_form(const Eigen::MatrixBase<Derived>& v) const {
    return solve_lower(v).squaredNorm();
  }

 private:
  Matrix<Scalar> l_;
};

/// Eigendecomposition of a symmetric matrix: values descending, vectors as
/// orthonormal columns.
template <typename Scalar>
struct EigenResult {
  Vector<Scalar> values;
  Matrix<Scalar> vectors;
};

namespace detail {

template <typename Scalar>
bool lexicographically_greater(const Vector<Scalar>& a, const Vector<Scalar>& b) {
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a(i) != b(i)) return a(i) > b(i);
  }
  return false;
}

}  // namespace detail

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Each eigenvector is oriented so its largest-magnitude entry is positive.
/// Values are sorted descending; runs of values equal within `tol` (relative
/// to the spectral radius) are ordered by their first differing eigenvector
/// entry, largest first.
template <typename Derived>
EigenResult<typename Derived::Scalar> symmetric_eigen(const Eigen::MatrixBase<Derived>& input,
                                                      double tol = 1e-10) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> a = symmetrize_checked(input, "symmetric_eigen");
  const Eigen::Index k = a.rows();
  Matrix<Scalar> v = Matrix<Scalar>::Identity(k, k);

  const Scalar total = a.squaredNorm();
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    Scalar off = a.squaredNorm() - a.diagonal().squaredNorm();
    if (off <= std::numeric_limits<Scalar>::epsilon() * std::numeric_limits<Scalar>::epsilon() * total ||
        off == Scalar(0))
      break;
    for (Eigen::Index p = 0; p + 1 < k; ++p) {
      for (Eigen::Index q = p + 1; q < k; ++q) {
        if (a(p, q) == Scalar(0)) continue;
        Eigen::JacobiRotation<Scalar> rot;
        rot.makeJacobi(a, p, q);
        a.applyOnTheLeft(p, q, rot.adjoint());
        a.applyOnTheRight(p, q, rot);
        v.applyOnTheRight(p, q, rot);
        a(p, q) = a(q, p) = Scalar(0);
      }
    }
  }

  std::vector<Vector<Scalar>> cols;
  cols.reserve(static_cast<std::size_t>(k));
  for (Eigen::Index j = 0; j < k; ++j) {
    Vector<Scalar> col = v.col(j);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < Scalar(0)) col = -col;
    cols.push_back(std::move(col));
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const Vector<Scalar> diag = a.diagonal();
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return diag(x) > diag(y); });

  const Scalar radius = k == 0 ? Scalar(0) : diag.cwiseAbs().maxCoeff();
  const Scalar tie = Scalar(tol) * std::max<Scalar>(Scalar(1), radius);
  for (std::size_t begin = 0; begin < order.size();) {
    std::size_t end = begin + 1;
    while (end < order.size() && diag(order[end - 1]) - diag(order[end]) <= tie) ++end;
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](Eigen::Index x, Eigen::Index y) {
                       return detail::lexicographically_greater(cols[x], cols[y]);
                     });
    begin = end;
  }

  EigenResult<Scalar> out{Vector<Scalar>(k), Matrix<Scalar>(k, k)};
  for (Eigen::Index j = 0; j < k; ++j) {
    out.values(j) = diag(order[j]);
    out.vectors.col(j) = cols[order[j]];
  }
  return out;
}

/// Orthonormal basis for the column span of `a` (thin Householder QR).
template <typename Derived>
Matrix<typename Derived::Scalar> orthonormal_basis(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  Eigen::HouseholderQR<Matrix<Scalar>> qr(a);
  return qr.householderQ() * Matrix<Scalar>::Identity(a.rows(), a.cols());
}

/// Principal angles (radians, descending) between the column spans of two
/// d x p full-column-rank matrices. Computed from the singular values of
/// (I - Q_a Q_a^T) Q_b, i.e. the sines, which stays accurate for tiny angles.
template <typename DerivedA, typename DerivedB>
Vector<typename DerivedA::Scalar> principal_angles(const Eigen::MatrixBase<DerivedA>& a,
                                                   const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  check_dim("principal_angles rows", a.rows(), b.rows());
  check_dim("principal_angles cols", a.cols(), b.cols());
  const Matrix<Scalar> qa = orthonormal_basis(a);
  const Matrix<Scalar> qb = orthonormal_basis(b);
  const Matrix<Scalar> residual = qb - qa * (qa.transpose() * qb);
  Eigen::JacobiSVD<Matrix<Scalar>> svd(residual);
  Vector<Scalar> angles = svd.singularValues();
  for (Eigen::Index i = 0; i < angles.size(); ++i)
    angles(i) = std::asin(std::min<Scalar>(Scalar(1), angles(i)));
  return angles;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar max_principal_angle(const Eigen::MatrixBase<DerivedA>& a,
                                              const Eigen::MatrixBase<DerivedB>& b) {
  const auto angles = principal_angles(a, b);
  return angles.size() == 0 ? typename DerivedA::Scalar(0) : angles.maxCoeff();
}

/// Column means of an n x d data matrix.
template <typename Derived>
Vector<typename Derived::Scalar> column_mean(const Eigen::MatrixBase<Derived>& data) {
  return data.colwise().mean().transpose();
}

/// Biased (1/n) sample covariance of the rows of `data` about `mean`.
template <typename Derived, typename DerivedMean>
Matrix<typename Derived::Scalar> sample_covariance(const Eigen::MatrixBase<Derived>& data,
                                                   const Eigen::MatrixBase<DerivedMean>& mean) {
  using Scalar = typename Derived::Scalar;
  const Matrix<Scalar> centered = data.rowwise() - mean.transpose();
  Matrix<Scalar> s = centered.transpose() * centered / static_cast<Scalar>(data.rows());
  return (s + s.transpose()) / Scalar(2);
}

}  // namespace latentlab
