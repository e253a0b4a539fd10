#pragma once

#include "latentlab/core.hpp"
#include "latentlab/gaussian.hpp"
#include "latentlab/linalg.hpp"
#include "latentlab/rng.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace latentlab::fa {

/// Lower bound applied to every noise variance after an M-step.
inline constexpr double kNoiseFloor = 1e-10;

struct FitConfig {
  int max_iter = 500;
  double rel_tol = 1e-7;  // on the relative change of the log-likelihood
  std::uint64_t seed = 0;
  bool center = false;

  void validate() const {
    if (max_iter < 1) throw InvalidArgument("FitConfig: max_iter must be at least 1");
    if (!(rel_tol > 0)) throw InvalidArgument("FitConfig: rel_tol must be positive");
  }
};

struct FitTrace {
  std::vector<double> loglik_per_iter;
  int iterations_run = 0;
  bool converged = false;
};

/// x = loading * z + offset + eps,  z ~ N(0, I_p),  eps ~ N(0, diag(noise_diag)).
template <typename Scalar>
struct FactorModel {
  Matrix<Scalar> loading;     // d x p
  Vector<Scalar> offset;      // d
  Vector<Scalar> noise_diag;  // d, strictly positive

  Eigen::Index d() const { return loading.rows(); }
  Eigen::Index p() const { return loading.cols(); }

  void validate() const {
    if (d() == 0) throw InvalidArgument("FactorModel: data dimension must be at least 1");
    if (p() > d()) throw InvalidArgument("FactorModel: latent dimension exceeds data dimension");
    check_dim("FactorModel offset", d(), offset.size());
    check_dim("FactorModel noise_diag", d(), noise_diag.size());
    if (!loading.allFinite() || !offset.allFinite() || !noise_diag.allFinite())
      throw NonFinite("FactorModel: non-finite parameters");
    if (!(noise_diag.array() > Scalar(0)).all()) throw InvalidArgument("FactorModel: noise_diag must be positive");
  }

  /// Lambda Lambda^T + Psi, assembled as a rank-p update of a diagonal.
  Matrix<Scalar> marginal_cov() const {
    Matrix<Scalar> c = loading * loading.transpose();
    c.diagonal() += noise_diag;
    return c;
  }
};

/// Gaussian q(z) = N(mean, cov) together with E[z z^T] = cov + mean mean^T.
template <typename Scalar>
struct LatentPosterior {
  Vector<Scalar> mean;
  Matrix<Scalar> cov;
  Matrix<Scalar> second_moment;
};

template <typename Scalar>
GaussianFull<Scalar> marginal_x(const FactorModel<Scalar>& model) {
  model.validate();
  return GaussianFull<Scalar>(model.offset, model.marginal_cov());
}

template <typename Scalar, typename Derived>
Scalar log_likelihood(const FactorModel<Scalar>& model, const Eigen::MatrixBase<Derived>& data) {
  check_dim("log_likelihood data columns", model.d(), data.cols());
  return log_density_rows(marginal_x(model), data).sum();
}

/// The x-independent part of the posterior: gain = Lambda^T C^{-1} and
/// cov = I - Lambda^T C^{-1} Lambda with C = Lambda Lambda^T + Psi.
template <typename Scalar>
struct PosteriorOperator {
  Matrix<Scalar> gain;  // p x d
  Matrix<Scalar> cov;   // p x p
};

template <typename Scalar>
PosteriorOperator<Scalar> posterior_operator(const FactorModel<Scalar>& model) {
  model.validate();
  const Cholesky<Scalar> c(model.marginal_cov(), "posterior: Lambda Lambda^T + Psi");
  Matrix<Scalar> gain = c.solve(model.loading).transpose();
  Matrix<Scalar> cov = Matrix<Scalar>::Identity(model.p(), model.p()) - gain * model.loading;
  cov = (cov + cov.transpose()) / Scalar(2);
  return {std::move(gain), std::move(cov)};
}

template <typename Scalar, typename Derived>
LatentPosterior<Scalar> e_step(const PosteriorOperator<Scalar>& op, const Vector<Scalar>& offset,
                               const Eigen::MatrixBase<Derived>& x) {
  check_dim("e_step", offset.size(), x.size());
  Vector<Scalar> mean = op.gain * (x - offset);
  Matrix<Scalar> second = op.cov + mean * mean.transpose();
  return {std::move(mean), op.cov, std::move(second)};
}

template <typename Scalar, typename Derived>
LatentPosterior<Scalar> e_step(const FactorModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x) {
  return e_step(posterior_operator(model), model.offset, x);
}

/// Posterior means for every row, n x p.
template <typename Scalar, typename Derived>
Matrix<Scalar> transform(const FactorModel<Scalar>& model, const Eigen::MatrixBase<Derived>& data) {
  check_dim("transform data columns", model.d(), data.cols());
  const auto op = posterior_operator(model);
  return (data.rowwise() - model.offset.transpose()) * op.gain.transpose();
}

/// Sums the M-step consumes: cross = sum (x_i - mu) E[z_i]^T,
/// second = sum E[z_i z_i^T], data_sq = diag(sum (x_i - mu)(x_i - mu)^T).
template <typename Scalar>
struct SufficientStats {
  Matrix<Scalar> cross;
  Matrix<Scalar> second;
  Vector<Scalar> data_sq;
  Eigen::Index n = 0;
};

/// New loading and the diagonal of the expected residual covariance S.
template <typename Scalar>
struct MStepResult {
  Matrix<Scalar> loading;
  Vector<Scalar> s_diag;
};

template <typename Scalar>
MStepResult<Scalar> m_step_from_stats(const SufficientStats<Scalar>& stats) {
  Cholesky<Scalar> second;
  try {
    second = Cholesky<Scalar>(stats.second, "m_step: sum of E[z z^T]");
  } catch (const NotPositiveDefinite& e) {
    throw InvalidArgument(std::string(e.what()) + "; the latent dimension is too large for this data, try a smaller p");
  }
  Matrix<Scalar> loading = second.solve(stats.cross.transpose()).transpose();
  const Scalar n = static_cast<Scalar>(stats.n);
  Vector<Scalar> s_diag = (stats.data_sq - Scalar(2) * (loading.cwiseProduct(stats.cross)).rowwise().sum() +
                           (loading * stats.second).cwiseProduct(loading).rowwise().sum()) /
                          n;
  return {std::move(loading), std::move(s_diag)};
}

/// M-step from explicit per-row posteriors. Returns (loading, noise_diag).
template <typename Scalar, typename Derived>
std::pair<Matrix<Scalar>, Vector<Scalar>> m_step(const Eigen::MatrixBase<Derived>& data,
                                                 std::span<const LatentPosterior<Scalar>> posteriors,
                                                 const Vector<Scalar>& mu) {
  if (static_cast<Eigen::Index>(posteriors.size()) != data.rows())
    throw DimensionMismatch("m_step posteriors", data.rows(), static_cast<Eigen::Index>(posteriors.size()));
  if (posteriors.empty()) throw InvalidArgument("m_step: no data");
  check_dim("m_step data columns", mu.size(), data.cols());
  const Eigen::Index d = data.cols();
  const Eigen::Index p = posteriors.front().mean.size();
  SufficientStats<Scalar> stats{Matrix<Scalar>::Zero(d, p), Matrix<Scalar>::Zero(p, p), Vector<Scalar>::Zero(d),
                                data.rows()};
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const auto& post = posteriors[static_cast<std::size_t>(i)];
    check_dim("m_step posterior mean", p, post.mean.size());
    const Vector<Scalar> xc = data.row(i).transpose() - mu;
    stats.cross += xc * post.mean.transpose();
    stats.second += post.second_moment;
    stats.data_sq += xc.cwiseAbs2();
  }
  auto result = m_step_from_stats(stats);
  Vector<Scalar> noise = result.s_diag.cwiseMax(Scalar(kNoiseFloor));
  return {std::move(result.loading), std::move(noise)};
}

template <typename Scalar>
Matrix<Scalar> sample_data(const FactorModel<Scalar>& model, Eigen::Index n, Rng& rng) {
  model.validate();
  if (n < 1) throw InvalidArgument("sample_data: n must be at least 1");
  const Matrix<Scalar> z = rng.normal_matrix<Scalar>(n, model.p());
  const Matrix<Scalar> eps = rng.normal_matrix<Scalar>(n, model.d()) * model.noise_diag.cwiseSqrt().asDiagonal();
  Matrix<Scalar> x = z * model.loading.transpose() + eps;
  x.rowwise() += model.offset.transpose();
  return x;
}

namespace detail {

template <typename Scalar, typename Derived>
void validate_fit_input(const Eigen::MatrixBase<Derived>& data, Eigen::Index p, const char* who) {
  if (data.rows() < 2) throw InvalidArgument(std::string(who) + ": need at least 2 data points");
  if (p < 1 || p >= data.cols())
    throw InvalidArgument(std::string(who) + ": latent dimension must satisfy 1 <= p < d");
  if (!data.allFinite()) throw NonFinite(std::string(who) + ": data contains non-finite values");
}

/// E-step statistics over all rows with the shared posterior covariance.
/// `centered` holds x_i - mu already; otherwise the offset is subtracted per row.
template <typename Scalar>
SufficientStats<Scalar> expected_stats(const FactorModel<Scalar>& model, const Matrix<Scalar>& data,
                                       bool centered) {
  const auto op = posterior_operator(model);
  const Eigen::Index n = data.rows();
  Matrix<Scalar> means;
  Vector<Scalar> data_sq;
  Matrix<Scalar> cross;
  if (centered) {
    means = data * op.gain.transpose();
    cross = data.transpose() * means;
    data_sq = data.colwise().squaredNorm().transpose();
  } else {
    const Matrix<Scalar> xc = data.rowwise() - model.offset.transpose();
    means = xc * op.gain.transpose();
    cross = xc.transpose() * means;
    data_sq = xc.colwise().squaredNorm().transpose();
  }
  Matrix<Scalar> second = static_cast<Scalar>(n) * op.cov + means.transpose() * means;
  return {std::move(cross), (second + second.transpose()) / Scalar(2), std::move(data_sq), n};
}

/// Shared EM driver; `update_noise` maps the S diagonal onto the new noise vector.
template <typename Scalar, typename Derived, typename NoiseUpdate>
std::pair<FactorModel<Scalar>, FitTrace> run_em(const Eigen::MatrixBase<Derived>& data_in, Eigen::Index p,
                                                const FitConfig& config, Vector<Scalar> initial_noise,
                                                NoiseUpdate update_noise) {
  const Matrix<Scalar> data = data_in;
  const Vector<Scalar> mu = column_mean(data);
  Rng rng(config.seed);
  FactorModel<Scalar> model{rng.normal_matrix<Scalar>(data.cols(), p) * Scalar(0.1), mu, std::move(initial_noise)};

  // The centered path runs on mu-free data with a zero offset and restores mu at the end.
  Matrix<Scalar> work = data;
  if (config.center) {
    work.rowwise() -= mu.transpose();
    model.offset.setZero();
  }

  FitTrace trace;
  double previous = static_cast<double>(log_likelihood(model, work));
  for (int iter = 0; iter < config.max_iter; ++iter) {
    const auto stats = expected_stats(model, work, config.center);
    auto result = m_step_from_stats(stats);
    model.loading = std::move(result.loading);
    model.noise_diag = update_noise(result.s_diag);
    const double current = static_cast<double>(log_likelihood(model, work));
    if (!std::isfinite(current)) throw NonFinite("EM: log-likelihood became non-finite");
    trace.loglik_per_iter.push_back(current);
    trace.iterations_run = iter + 1;
    if (std::abs(current - previous) <= config.rel_tol * std::abs(previous)) {
      trace.converged = true;
      break;
    }
    previous = current;
  }
  model.offset = mu;
  return {std::move(model), std::move(trace)};
}

}  // namespace detail

/// Fits a factor analysis model by EM. Loading starts i.i.d. N(0, 0.01)
/// from config.seed; noise starts at the per-dimension sample variance.
template <typename Derived>
std::pair<FactorModel<typename Derived::Scalar>, FitTrace> fit_em(const Eigen::MatrixBase<Derived>& data,
                                                                  Eigen::Index p, const FitConfig& config) {
  using Scalar = typename Derived::Scalar;
  config.validate();
  detail::validate_fit_input<Scalar>(data, p, "factor_analysis::fit_em");
  const Vector<Scalar> mu = column_mean(data);
  Vector<Scalar> var = sample_covariance(data, mu).diagonal().cwiseMax(Scalar(kNoiseFloor));
  return detail::run_em<Scalar>(data, p, config, std::move(var), [](const Vector<Scalar>& s_diag) {
    return Vector<Scalar>(s_diag.cwiseMax(Scalar(kNoiseFloor)));
  });
}

}  // namespace latentlab::fa
