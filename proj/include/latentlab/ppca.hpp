#pragma once

#include "latentlab/core.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/gaussian.hpp"
#include "latentlab/linalg.hpp"

#include <cmath>
#include <optional>
#include <utility>

namespace latentlab::ppca {

using fa::FitConfig;
using fa::FitTrace;

/// Smallest noise variance fit_mle will report; data of rank <= p hits it.
inline constexpr double kSigma2Floor = 1e-12;

/// Factor analysis with isotropic noise: x = loading * z + offset + eps,
/// eps ~ N(0, sigma2 * I).
template <typename Scalar>
struct PpcaModel {
  Matrix<Scalar> loading;  // d x p
  Vector<Scalar> offset;   // d
  Scalar sigma2 = Scalar(1);
  bool rank_warning = false;  // sigma2 was floored because the data has rank <= p

  Eigen::Index d() const { return loading.rows(); }
  Eigen::Index p() const { return loading.cols(); }

  void validate() const {
    if (p() >= d()) throw InvalidArgument("PpcaModel: latent dimension must be smaller than data dimension");
    check_dim("PpcaModel offset", d(), offset.size());
    if (!loading.allFinite() || !offset.allFinite() || !std::isfinite(static_cast<double>(sigma2)))
      throw NonFinite("PpcaModel: non-finite parameters");
    if (!(sigma2 > Scalar(0))) throw InvalidArgument("PpcaModel: sigma2 must be positive");
  }

  fa::FactorModel<Scalar> to_factor_model() const {
    return {loading, offset, Vector<Scalar>::Constant(d(), sigma2)};
  }
};

/// Top-p principal subspace of the sample covariance.
template <typename Scalar>
struct PcaModel {
  Matrix<Scalar> components;           // d x p, orthonormal columns
  Vector<Scalar> explained_variance;   // p, descending
  Vector<Scalar> offset;               // d
};

template <typename Derived>
EigenResult<typename Derived::Scalar> covariance_eigen(const Eigen::MatrixBase<Derived>& data) {
  return symmetric_eigen(sample_covariance(data, column_mean(data)));
}

/// Closed-form maximum likelihood fit:
///   sigma2 = mean of the d - p trailing eigenvalues of S_x,
///   loading = U_p (Delta_p - sigma2 I)^{1/2} R,
/// with R = I unless `rotation` is given.
template <typename Derived>
PpcaModel<typename Derived::Scalar> fit_mle(const Eigen::MatrixBase<Derived>& data, Eigen::Index p,
                                            const std::optional<Matrix<typename Derived::Scalar>>& rotation = {}) {
  using Scalar = typename Derived::Scalar;
  fa::detail::validate_fit_input<Scalar>(data, p, "ppca::fit_mle");
  const Eigen::Index d = data.cols();
  const Vector<Scalar> mu = column_mean(data);
  const auto eig = symmetric_eigen(sample_covariance(data, mu));

  PpcaModel<Scalar> model;
  model.offset = mu;
  model.sigma2 = eig.values.tail(d - p).sum() / static_cast<Scalar>(d - p);
  if (!(model.sigma2 >= Scalar(kSigma2Floor))) {
    model.sigma2 = Scalar(kSigma2Floor);
    model.rank_warning = true;
  }
  const Vector<Scalar> scale = (eig.values.head(p).array() - model.sigma2).cwiseMax(Scalar(0)).sqrt().matrix();
  model.loading = eig.vectors.leftCols(p) * scale.asDiagonal();
  if (rotation) {
    check_dim("fit_mle rotation rows", p, rotation->rows());
    check_dim("fit_mle rotation cols", p, rotation->cols());
    const Scalar err = (rotation->transpose() * *rotation - Matrix<Scalar>::Identity(p, p)).cwiseAbs().maxCoeff();
    if (!(err <= Scalar(1e-9))) throw InvalidArgument("fit_mle: rotation is not orthogonal");
    model.loading = model.loading * *rotation;
  }
  return model;
}

/// EM with the isotropic constraint: the noise update is the mean of the
/// diagonal of the expected residual covariance.
template <typename Derived>
std::pair<PpcaModel<typename Derived::Scalar>, FitTrace> fit_em(const Eigen::MatrixBase<Derived>& data, Eigen::Index p,
                                                               const FitConfig& config) {
  using Scalar = typename Derived::Scalar;
  config.validate();
  fa::detail::validate_fit_input<Scalar>(data, p, "ppca::fit_em");
  const Eigen::Index d = data.cols();
  const Scalar var = std::max(sample_covariance(data, column_mean(data)).diagonal().mean(), Scalar(fa::kNoiseFloor));
  auto [fm, trace] = fa::detail::run_em<Scalar>(data, p, config, Vector<Scalar>::Constant(d, var),
                                                [d](const Vector<Scalar>& s_diag) {
                                                  const Scalar s2 = std::max(s_diag.mean(), Scalar(fa::kNoiseFloor));
                                                  return Vector<Scalar>(Vector<Scalar>::Constant(d, s2));
                                                });
  PpcaModel<Scalar> model{std::move(fm.loading), std::move(fm.offset), fm.noise_diag(0), false};
  return {std::move(model), std::move(trace)};
}

/// C^{-1} for C = Lambda Lambda^T + sigma2 I through the p x p system
/// M = Lambda^T Lambda + sigma2 I:  C^{-1} = sigma2^{-1} (I - Lambda M^{-1} Lambda^T).
template <typename Scalar>
Matrix<Scalar> inverse_c(const PpcaModel<Scalar>& model) {
  model.validate();
  Matrix<Scalar> m = model.loading.transpose() * model.loading;
  m.diagonal().array() += model.sigma2;
  const Cholesky<Scalar> chol(m, "inverse_c: M");
  Matrix<Scalar> out = -model.loading * chol.solve(model.loading.transpose());
  out.diagonal().array() += Scalar(1);
  out /= model.sigma2;
  return (out + out.transpose()) / Scalar(2);
}

/// p(z | x) = N(Lambda^T C^{-1} (x - mu), I - Lambda^T C^{-1} Lambda).
///
/// Evaluated through M = Lambda^T Lambda + sigma2 I as mean M^{-1} Lambda^T (x - mu)
/// and covariance sigma2 M^{-1}; both are exact rewrites that stay well
/// conditioned as sigma2 -> 0, where the C^{-1} form cancels catastrophically.
template <typename Scalar, typename Derived>
GaussianFull<Scalar> posterior(const PpcaModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x) {
  model.validate();
  check_dim("ppca::posterior", model.d(), x.size());
  Matrix<Scalar> m = model.loading.transpose() * model.loading;
  m.diagonal().array() += model.sigma2;
  const Cholesky<Scalar> chol(m, "ppca::posterior: M");
  Vector<Scalar> mean = chol.solve(model.loading.transpose() * (x - model.offset));
  Matrix<Scalar> cov = model.sigma2 * chol.inverse();
  return GaussianFull<Scalar>(std::move(mean), (cov + cov.transpose()) / Scalar(2));
}

/// Zero-noise posterior means (Lambda^T Lambda)^{-1} Lambda^T (x_i - mu), n x p.
template <typename Scalar, typename Derived>
Matrix<Scalar> zero_noise_projection(const PpcaModel<Scalar>& model, const Eigen::MatrixBase<Derived>& data) {
  check_dim("zero_noise_projection data columns", model.d(), data.cols());
  Cholesky<Scalar> gram;
  try {
    gram = Cholesky<Scalar>(model.loading.transpose() * model.loading, "zero_noise_projection: Lambda^T Lambda");
  } catch (const NotPositiveDefinite& e) {
    throw InvalidArgument(std::string(e.what()) + "; loading does not have full column rank");
  }
  const Matrix<Scalar> centered = data.rowwise() - model.offset.transpose();
  return gram.solve(model.loading.transpose() * centered.transpose()).transpose();
}

template <typename Derived>
PcaModel<typename Derived::Scalar> pca_baseline(const Eigen::MatrixBase<Derived>& data, Eigen::Index p) {
  using Scalar = typename Derived::Scalar;
  fa::detail::validate_fit_input<Scalar>(data, p, "pca_baseline");
  const Vector<Scalar> mu = column_mean(data);
  const auto eig = symmetric_eigen(sample_covariance(data, mu));
  return {eig.vectors.leftCols(p), eig.values.head(p), mu};
}

/// Projection onto the principal subspace, n x p.
template <typename Scalar, typename Derived>
Matrix<Scalar> pca_transform(const PcaModel<Scalar>& pca, const Eigen::MatrixBase<Derived>& data) {
  check_dim("pca_transform data columns", pca.offset.size(), data.cols());
  return (data.rowwise() - pca.offset.transpose()) * pca.components;
}

/// ||(X - mu) - U U^T (X - mu)||_F^2.
template <typename Scalar, typename Derived>
Scalar reconstruction_error(const PcaModel<Scalar>& pca, const Eigen::MatrixBase<Derived>& data) {
  check_dim("reconstruction_error data columns", pca.offset.size(), data.cols());
  const Matrix<Scalar> centered = data.rowwise() - pca.offset.transpose();
  return (centered - centered * pca.components * pca.components.transpose()).squaredNorm();
}

template <typename Scalar, typename Derived>
Scalar log_likelihood(const PpcaModel<Scalar>& model, const Eigen::MatrixBase<Derived>& data) {
  model.validate();
  return fa::log_likelihood(model.to_factor_model(), data);
}

}  // namespace latentlab::ppca
