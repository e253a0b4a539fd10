#pragma once

#include "latentlab/core.hpp"
#include "latentlab/linalg.hpp"
#include "latentlab/rng.hpp"

#include <cmath>
#include <numbers>
#include <utility>

namespace latentlab {

/// Variances at or below this value are rejected.
inline constexpr double kVarianceFloor = 1e-12;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Multivariate normal with a dense covariance. The covariance is
/// symmetrized and Cholesky-factorized on construction, so a constructed
/// object always holds a positive definite covariance.
template <typename Scalar>
class GaussianFull {
 public:
  GaussianFull(Vector<Scalar> mean, const Matrix<Scalar>& cov, Scalar ridge = Scalar(0))
      : mean_(std::move(mean)) {
    if (mean_.size() == 0) throw InvalidArgument("GaussianFull: dimension must be at least 1");
    check_dim("GaussianFull covariance rows", mean_.size(), cov.rows());
    check_dim("GaussianFull covariance cols", mean_.size(), cov.cols());
    if (!mean_.allFinite() || !cov.allFinite()) throw NonFinite("GaussianFull: non-finite parameters");
    cov_ = symmetrize_checked(cov, "GaussianFull covariance");
    if (ridge != Scalar(0)) cov_.diagonal().array() += ridge;
    chol_ = Cholesky<Scalar>(cov_, "GaussianFull covariance");
  }

  static GaussianFull standard(Eigen::Index k) {
    return GaussianFull(Vector<Scalar>::Zero(k), Matrix<Scalar>::Identity(k, k));
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vector<Scalar>& mean() const { return mean_; }
  const Matrix<Scalar>& cov() const { return cov_; }
  const Cholesky<Scalar>& cholesky() const { return chol_; }

 private:
  Vector<Scalar> mean_;
  Matrix<Scalar> cov_;
  Cholesky<Scalar> chol_;
};

/// Multivariate normal with diagonal covariance `diag(var)`.
template <typename Scalar>
class GaussianDiag {
 public:
  GaussianDiag(Vector<Scalar> mean, Vector<Scalar> var) : mean_(std::move(mean)), var_(std::move(var)) {
    if (mean_.size() == 0) throw InvalidArgument("GaussianDiag: dimension must be at least 1");
    check_dim("GaussianDiag variance", mean_.size(), var_.size());
    if (!mean_.allFinite() || !var_.allFinite()) throw NonFinite("GaussianDiag: non-finite parameters");
    for (Eigen::Index i = 0; i < var_.size(); ++i) {
      if (!(var_(i) > Scalar(kVarianceFloor)))
        throw InvalidArgument("GaussianDiag: variance " + std::to_string(static_cast<double>(var_(i))) +
                              " at index " + std::to_string(i) + " is below the floor 1e-12");
    }
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vector<Scalar>& mean() const { return mean_; }
  const Vector<Scalar>& var() const { return var_; }

  GaussianFull<Scalar> to_full() const { return GaussianFull<Scalar>(mean_, var_.asDiagonal().toDenseMatrix()); }

 private:
  Vector<Scalar> mean_;
  Vector<Scalar> var_;
};

/// Joint Gaussian over (x, z) in block form:
///   mean = [mu; mu0],  cov = [[s11, s12], [s12^T, s22]].
template <typename Scalar>
struct JointGaussianBlocks {
  Vector<Scalar> mu;
  Vector<Scalar> mu0;
  Matrix<Scalar> s11;
  Matrix<Scalar> s12;
  Matrix<Scalar> s22;

  Eigen::Index x_dim() const { return mu.size(); }
  Eigen::Index z_dim() const { return mu0.size(); }

  void validate() const {
    if (mu.size() == 0 || mu0.size() == 0)
      throw InvalidArgument("JointGaussianBlocks: both blocks need dimension at least 1");
    check_dim("JointGaussianBlocks s11 rows", x_dim(), s11.rows());
    check_dim("JointGaussianBlocks s11 cols", x_dim(), s11.cols());
    check_dim("JointGaussianBlocks s12 rows", x_dim(), s12.rows());
    check_dim("JointGaussianBlocks s12 cols", z_dim(), s12.cols());
    check_dim("JointGaussianBlocks s22 rows", z_dim(), s22.rows());
    check_dim("JointGaussianBlocks s22 cols", z_dim(), s22.cols());
  }

  Vector<Scalar> joint_mean() const {
    Vector<Scalar> m(x_dim() + z_dim());
    m << mu, mu0;
    return m;
  }

  Matrix<Scalar> joint_cov() const {
    Matrix<Scalar> c(x_dim() + z_dim(), x_dim() + z_dim());
    c << s11, s12, s12.transpose(), s22;
    return c;
  }

  GaussianFull<Scalar> joint() const {
    validate();
    return GaussianFull<Scalar>(joint_mean(), joint_cov());
  }
};

template <typename Scalar, typename Derived>
Scalar log_density(const GaussianFull<Scalar>& g, const Eigen::MatrixBase<Derived>& x) {
  check_dim("log_density", g.dim(), x.size());
  const Vector<Scalar> diff = x - g.mean();
  const Scalar k = static_cast<Scalar>(g.dim());
  return Scalar(-0.5) * (k * Scalar(kLog2Pi) + g.cholesky().log_det() + g.cholesky().quad_form(diff));
}

template <typename Scalar, typename Derived>
Scalar log_density(const GaussianDiag<Scalar>& g, const Eigen::MatrixBase<Derived>& x) {
  check_dim("log_density", g.dim(), x.size());
  const auto diff = (x - g.mean()).array();
  return Scalar(-0.5) * (static_cast<Scalar>(g.dim()) * Scalar(kLog2Pi) + g.var().array().log().sum() +
                         (diff.square() / g.var().array()).sum());
}

/// log N(x_i | g) for every row x_i of an n x k matrix.
template <typename Scalar, typename Derived>
Vector<Scalar> log_density_rows(const GaussianFull<Scalar>& g, const Eigen::MatrixBase<Derived>& rows) {
  check_dim("log_density_rows", g.dim(), rows.cols());
  const Matrix<Scalar> centered = (rows.rowwise() - g.mean().transpose()).transpose();
  const Matrix<Scalar> white = g.cholesky().solve_lower(centered);
  const Scalar constant = Scalar(-0.5) * (static_cast<Scalar>(g.dim()) * Scalar(kLog2Pi) + g.cholesky().log_det());
  return (Scalar(-0.5) * white.colwise().squaredNorm().transpose()).array() + constant;
}

/// n i.i.d. draws as rows: x = mean + L eps with eps drawn row by row.
template <typename Scalar>
Matrix<Scalar> sample(const GaussianFull<Scalar>& g, Eigen::Index n, Rng& rng) {
  if (n < 1) throw InvalidArgument("sample: n must be at least 1");
  const Matrix<Scalar> eps = rng.normal_matrix<Scalar>(n, g.dim());
  Matrix<Scalar> out = eps * g.cholesky().matrix_l().transpose();
  out.rowwise() += g.mean().transpose();
  return out;
}

template <typename Scalar>
Matrix<Scalar> sample(const GaussianDiag<Scalar>& g, Eigen::Index n, Rng& rng) {
  if (n < 1) throw InvalidArgument("sample: n must be at least 1");
  Matrix<Scalar> out = rng.normal_matrix<Scalar>(n, g.dim()) * g.var().cwiseSqrt().asDiagonal();
  out.rowwise() += g.mean().transpose();
  return out;
}

/// z | x for a joint Gaussian: N(mu0 + S21 S11^{-1} (x - mu), S22 - S21 S11^{-1} S12).
template <typename Scalar, typename Derived>
GaussianFull<Scalar> conditional(const JointGaussianBlocks<Scalar>& j, const Eigen::MatrixBase<Derived>& x) {
  j.validate();
  check_dim("conditional", j.x_dim(), x.size());
  const Cholesky<Scalar> s11(j.s11, "conditional: s11");
  const Matrix<Scalar> gain = s11.solve(j.s12).transpose();  // S21 S11^{-1}
  Vector<Scalar> mean = j.mu0 + gain * (x - j.mu);
  Matrix<Scalar> cov = j.s22 - gain * j.s12;
  return GaussianFull<Scalar>(std::move(mean), (cov + cov.transpose()) / Scalar(2));
}

template <typename Scalar>
std::pair<GaussianFull<Scalar>, GaussianFull<Scalar>> marginal(const JointGaussianBlocks<Scalar>& j) {
  j.validate();
  return {GaussianFull<Scalar>(j.mu, j.s11), GaussianFull<Scalar>(j.mu0, j.s22)};
}

/// KL(p1 || p2) for one-dimensional Gaussians.
template <typename Scalar>
Scalar kl_univariate(const GaussianDiag<Scalar>& p1, const GaussianDiag<Scalar>& p2) {
  if (p1.dim() != 1 || p2.dim() != 1) throw InvalidArgument("kl_univariate: both arguments must be one-dimensional");
  const Scalar v1 = p1.var()(0);
  const Scalar v2 = p2.var()(0);
  const Scalar dm = p1.mean()(0) - p2.mean()(0);
  // log(sigma2 / sigma1) written through variances.
  return Scalar(0.5) * std::log(v2 / v1) + (v1 + dm * dm) / (Scalar(2) * v2) - Scalar(0.5);
}

/// KL(p1 || p2) = 1/2 (log|S2|/|S1| - p + tr(S2^{-1} S1) + (m2-m1)^T S2^{-1} (m2-m1)).
template <typename Scalar>
Scalar kl_multivariate(const GaussianFull<Scalar>& p1, const GaussianFull<Scalar>& p2) {
  check_dim("kl_multivariate", p1.dim(), p2.dim());
  const auto& c2 = p2.cholesky();
  // tr(S2^{-1} S1) = ||L2^{-1} L1||_F^2
  const Scalar trace = c2.solve_lower(p1.cholesky().matrix_l()).squaredNorm();
  const Scalar quad = c2.quad_form(p2.mean() - p1.mean());
  return Scalar(0.5) * (c2.log_det() - p1.cholesky().log_det() - static_cast<Scalar>(p1.dim()) + trace + quad);
}

template <typename Scalar>
struct MonteCarloEstimate {
  Scalar estimate;
  Scalar std_error;
};

/// Monte-Carlo KL(p1 || p2) from n draws of p1, processed in fixed-size chunks.
template <typename Scalar>
MonteCarloEstimate<Scalar> kl_monte_carlo(const GaussianFull<Scalar>& p1, const GaussianFull<Scalar>& p2,
                                          Eigen::Index n, Rng& rng) {
  check_dim("kl_monte_carlo", p1.dim(), p2.dim());
  if (n < 100) throw InvalidArgument("kl_monte_carlo: n must be at least 100");
  constexpr Eigen::Index kChunk = 65536;
  Scalar shift = 0;
  Scalar sum = 0;
  Scalar sum_sq = 0;
  for (Eigen::Index done = 0; done < n;) {
    const Eigen::Index m = std::min(kChunk, n - done);
    const Matrix<Scalar> z = sample(p1, m, rng);
    const Vector<Scalar> diff = log_density_rows(p1, z) - log_density_rows(p2, z);
    if (done == 0) shift = diff.mean();
    const auto shifted = diff.array() - shift;
    sum += shifted.sum();
    sum_sq += shifted.square().sum();
    done += m;
  }
  const Scalar count = static_cast<Scalar>(n);
  const Scalar mean = sum / count;
  const Scalar var = std::max(Scalar(0), (sum_sq - count * mean * mean) / (count - 1));
  return {shift + mean, std::sqrt(var / count)};
}

}  // namespace latentlab
