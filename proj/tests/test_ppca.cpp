#include "latentlab/factor_analysis.hpp"
#include "latentlab/ppca.hpp"
#include "latentlab/synthetic.hpp"

#include "test_util.hpp"

#include <Eigen/Eigenvalues>

namespace latentlab {
namespace {

using ppca::PpcaModel;

/// Data whose 1/n sample covariance is exactly diag(values): +-sqrt(v) on each axis.
MatrixXd axis_data(const VectorXd& values) {
  const Eigen::Index d = values.size();
  MatrixXd x = MatrixXd::Zero(2 * d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    x(2 * j, j) = std::sqrt(values(j) * d);
    x(2 * j + 1, j) = -std::sqrt(values(j) * d);
  }
  return x;
}

MatrixXd ppca_data(Eigen::Index d, Eigen::Index p, double sigma2, Eigen::Index n, Rng& rng) {
  auto m = random_factor_model(d, p, rng);
  m.noise_diag.setConstant(sigma2);
  return fa::sample_data(m, n, rng);
}

MatrixXd random_rotation(Eigen::Index p, Rng& rng) {
  Eigen::HouseholderQR<MatrixXd> qr(rng.normal_matrix(p, p));
  return qr.householderQ();
}

TEST(FitMle, DiagonalCovarianceExample) {
  VectorXd v(2);
  v << 4, 1;
  const MatrixXd x = axis_data(v);
  const auto m = ppca::fit_mle(x, 1);
  EXPECT_NEAR(m.sigma2, 1.0, 1e-12);
  MatrixXd expected = MatrixXd::Zero(2, 2);
  expected(0, 0) = 3.0;
  EXPECT_MATRIX_NEAR(m.loading * m.loading.transpose(), expected, 1e-12);
  EXPECT_NEAR(std::abs(m.loading(0, 0)), std::sqrt(3.0), 1e-12);
  EXPECT_FALSE(m.rank_warning);
}

TEST(FitMle, IsotropicDataCollapsesLoading) {
  const MatrixXd x = axis_data(VectorXd::Constant(4, 2.5));
  const auto m = ppca::fit_mle(x, 2);
  EXPECT_NEAR(m.sigma2, 2.5, 1e-12);
  EXPECT_LT(m.loading.norm(), 1e-6);
}

TEST(FitMle, SigmaSquaredIsTrailingEigenMean) {
  Rng rng(1);
  const MatrixXd x = ppca_data(8, 2, 0.3, 5000, rng);
  const auto m = ppca::fit_mle(x, 2);
  const VectorXd mu = x.colwise().mean().transpose();
  const MatrixXd xc = x.rowwise() - mu.transpose();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(xc.transpose() * xc / static_cast<double>(x.rows()));
  EXPECT_NEAR(m.sigma2, es.eigenvalues().head(6).mean(), 1e-10);
  EXPECT_MATRIX_NEAR(m.offset, mu, 1e-12);
}

TEST(FitMle, RotationLeavesCovarianceInvariant) {
  Rng rng(2);
  const MatrixXd x = ppca_data(6, 3, 0.2, 1000, rng);
  const auto a = ppca::fit_mle(x, 3);
  const auto b = ppca::fit_mle(x, 3, random_rotation(3, rng));
  EXPECT_MATRIX_NEAR(a.loading * a.loading.transpose(), b.loading * b.loading.transpose(), 1e-10);
  EXPECT_EQ(a.sigma2, b.sigma2);
  EXPECT_NEAR(ppca::log_likelihood(a, x), ppca::log_likelihood(b, x), 1e-8);
  EXPECT_GT((a.loading - b.loading).norm(), 1e-3);
}

TEST(FitMle, NonOrthogonalRotationRejected) {
  Rng rng(3);
  const MatrixXd x = ppca_data(4, 2, 0.2, 100, rng);
  EXPECT_THROW(ppca::fit_mle(x, 2, MatrixXd(2.0 * MatrixXd::Identity(2, 2))), InvalidArgument);
}

TEST(FitMle, LowRankDataFloorsSigma) {
  Rng rng(4);
  const MatrixXd z = rng.normal_matrix(50, 2);
  const MatrixXd x = z * rng.normal_matrix(2, 5);
  const auto m = ppca::fit_mle(x, 2);
  EXPECT_TRUE(m.rank_warning);
  EXPECT_EQ(m.sigma2, ppca::kSigma2Floor);
}

TEST(FitMle, RejectsLatentDimAtLeastD) {
  Rng rng(5);
  const MatrixXd x = rng.normal_matrix(20, 3);
  EXPECT_THROW(ppca::fit_mle(x, 3), InvalidArgument);
  EXPECT_THROW(ppca::fit_mle(x.topRows(1), 1), InvalidArgument);
}

TEST(FitMle, EigenProblemResidual) {
  Rng rng(6);
  const MatrixXd x = ppca_data(8, 3, 0.5, 3000, rng);
  const auto m = ppca::fit_mle(x, 3);
  const MatrixXd xc = x.rowwise() - m.offset.transpose();
  const MatrixXd s = xc.transpose() * xc / static_cast<double>(x.rows());
  // Columns of the loading are eigenvectors scaled by l_j, with delta_j = l_j^2 + sigma2.
  const VectorXd l2 = m.loading.colwise().squaredNorm().transpose();
  const MatrixXd u = m.loading * l2.cwiseSqrt().cwiseInverse().asDiagonal();
  const VectorXd delta = l2.array() + m.sigma2;
  EXPECT_LT((s * u - u * delta.asDiagonal()).norm(), 1e-6);
}

TEST(FitMle, BeatsPerturbedModels) {
  Rng rng(7);
  const MatrixXd x = ppca_data(6, 2, 0.4, 800, rng);
  const auto best = ppca::fit_mle(x, 2);
  const double ll = ppca::log_likelihood(best, x);
  for (int t = 0; t < 100; ++t) {
    auto other = best;
    other.loading += 0.05 * rng.normal_matrix(6, 2);
    EXPECT_GE(ll, ppca::log_likelihood(other, x));
  }
}

TEST(FitEm, MatchesClosedForm) {
  Rng rng(8);
  auto truth = random_factor_model(8, 2, rng);
  truth.loading.col(0) *= 3.0;
  truth.noise_diag.setConstant(0.25);
  const MatrixXd x = fa::sample_data(truth, 10000, rng);
  const auto mle = ppca::fit_mle(x, 2);
  const auto [em, trace] = ppca::fit_em(x, 2, {500, 1e-14, 0, false});
  EXPECT_LT(max_principal_angle(mle.loading, em.loading), 1e-3);
  EXPECT_LT(std::abs(em.sigma2 - mle.sigma2) / mle.sigma2, 1e-3);
  EXPECT_GE(ppca::log_likelihood(mle, x), ppca::log_likelihood(em, x) - 1e-6);
  for (std::size_t i = 1; i < trace.loglik_per_iter.size(); ++i)
    EXPECT_GE(trace.loglik_per_iter[i], trace.loglik_per_iter[i - 1] - 1e-8);
}

TEST(FitEm, ClosedFormIsNeverWorse) {
  Rng rng(9);
  for (int t = 0; t < 5; ++t) {
    const MatrixXd x = ppca_data(5 + t, 1 + t % 3, 0.3, 500, rng);
    const Eigen::Index p = 1 + t % 3;
    const auto mle = ppca::fit_mle(x, p);
    const auto [em, trace] = ppca::fit_em(x, p, {100, 1e-9, static_cast<std::uint64_t>(t), false});
    EXPECT_GE(ppca::log_likelihood(mle, x), ppca::log_likelihood(em, x) - 1e-6);
  }
}

TEST(InverseC, ZeroLoading) {
  const PpcaModel<double> m{MatrixXd::Zero(4, 2), VectorXd::Zero(4), 0.5, false};
  EXPECT_MATRIX_NEAR(ppca::inverse_c(m), 2.0 * MatrixXd::Identity(4, 4), 1e-15);
}

TEST(InverseC, ScalarCase) {
  // d = p = 1 is outside PpcaModel's p < d invariant, so check the same
  // arithmetic through the smallest valid model with a decoupled axis.
  PpcaModel<double> m{MatrixXd::Zero(2, 1), VectorXd::Zero(2), 1.0, false};
  m.loading(0, 0) = 1.0;
  const MatrixXd inv = ppca::inverse_c(m);
  EXPECT_NEAR(inv(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(inv(1, 1), 1.0, 1e-15);
  EXPECT_NEAR(inv(0, 1), 0.0, 1e-15);
}

TEST(InverseC, MatchesDenseInversion) {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index d = 3 + (t * 47) % 48;
    const Eigen::Index p = 1 + t % std::min<Eigen::Index>(5, d - 1);
    const PpcaModel<double> m{rng.normal_matrix(d, p), rng.normal_vector(d), 0.05 + 2 * rng.uniform(), false};
    MatrixXd c = m.loading * m.loading.transpose();
    c.diagonal().array() += m.sigma2;
    const MatrixXd inv = ppca::inverse_c(m);
    EXPECT_LT((c * inv - MatrixXd::Identity(d, d)).norm(), 1e-9);
    EXPECT_LT((inv - c.inverse()).norm(), 1e-9 * c.inverse().norm());
  }
}

TEST(InverseC, PrintedCoefficientDoesNotInvert) {
  // sigma^-1 I - sigma^-2 Lambda M^-1 Lambda^T fails the multiply-back check.
  Rng rng(11);
  const PpcaModel<double> m{rng.normal_matrix(10, 2), VectorXd::Zero(10), 0.25, false};
  MatrixXd c = m.loading * m.loading.transpose();
  c.diagonal().array() += m.sigma2;
  MatrixXd mm = m.loading.transpose() * m.loading;
  mm.diagonal().array() += m.sigma2;
  const MatrixXd printed = MatrixXd::Identity(10, 10) / std::sqrt(m.sigma2) -
                           m.loading * mm.inverse() * m.loading.transpose() / m.sigma2;
  EXPECT_GT((c * printed - MatrixXd::Identity(10, 10)).norm(), 0.1);
  EXPECT_LT((c * ppca::inverse_c(m) - MatrixXd::Identity(10, 10)).norm(), 1e-9);
}

TEST(Posterior, AgreesWithFactorAnalysisEStep) {
  Rng rng(12);
  const PpcaModel<double> m{rng.normal_matrix(6, 2), rng.normal_vector(6), 0.3, false};
  const VectorXd x = rng.normal_vector(6);
  const auto post = ppca::posterior(m, x);
  const auto fa_post = fa::e_step(m.to_factor_model(), x);
  EXPECT_MATRIX_NEAR(post.mean(), fa_post.mean, 1e-10);
  EXPECT_MATRIX_NEAR(post.cov(), fa_post.cov, 1e-10);
}

TEST(Posterior, MeanMatchesWoodburyForm) {
  Rng rng(13);
  const PpcaModel<double> m{rng.normal_matrix(7, 3), rng.normal_vector(7), 0.6, false};
  const VectorXd x = rng.normal_vector(7);
  const MatrixXd inv = ppca::inverse_c(m);
  const auto post = ppca::posterior(m, x);
  EXPECT_MATRIX_NEAR(post.mean(), m.loading.transpose() * inv * (x - m.offset), 1e-10);
  EXPECT_MATRIX_NEAR(post.cov(), MatrixXd::Identity(3, 3) - m.loading.transpose() * inv * m.loading, 1e-10);
}

TEST(Posterior, AtOffsetMeanIsZero) {
  Rng rng(14);
  const PpcaModel<double> m{rng.normal_matrix(4, 2), rng.normal_vector(4), 0.3, false};
  EXPECT_MATRIX_NEAR(ppca::posterior(m, m.offset).mean(), VectorXd::Zero(2), 0.0);
}

TEST(Posterior, ScalarCase) {
  PpcaModel<double> m{MatrixXd::Zero(2, 1), VectorXd::Zero(2), 1.0, false};
  m.loading(0, 0) = 1.0;
  VectorXd x = VectorXd::Zero(2);
  x(0) = 2.0;
  const auto post = ppca::posterior(m, x);
  EXPECT_NEAR(post.mean()(0), 1.0, 1e-15);
  EXPECT_NEAR(post.cov()(0, 0), 0.5, 1e-15);
}

TEST(ZeroNoise, ProjectionRecoversCoefficients) {
  Rng rng(15);
  const PpcaModel<double> m{rng.normal_matrix(6, 2), rng.normal_vector(6), 1.0, false};
  const VectorXd v = rng.normal_vector(2);
  const VectorXd x = m.offset + m.loading * v;
  EXPECT_MATRIX_NEAR(ppca::zero_noise_projection(m, x.transpose()).transpose(), v, 1e-12);
}

TEST(ZeroNoise, PosteriorMeanApproachesProjection) {
  Rng rng(16);
  for (int t = 0; t < 20; ++t) {
    const PpcaModel<double> m{rng.normal_matrix(6, 2), rng.normal_vector(6), 1e-10, false};
    const MatrixXd x = 3.0 * rng.normal_matrix(5, 6);
    const MatrixXd proj = ppca::zero_noise_projection(m, x);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      EXPECT_MATRIX_NEAR(ppca::posterior(m, x.row(i).transpose()).mean(), proj.row(i).transpose(), 1e-4);
    // Posterior covariance sigma2 M^{-1} vanishes in the limit.
    EXPECT_LT(ppca::posterior(m, x.row(0).transpose()).cov().norm(), 1e-8);
  }
}

TEST(ZeroNoise, PseudoInverseIdentity) {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index d = 4 + t % 6;
    const Eigen::Index p = 1 + t % 3;
    const MatrixXd lambda = rng.normal_matrix(d, p);
    // Left side through the eigendecomposition of Lambda Lambda^T with the
    // null space dropped, i.e. the sigma2 -> 0 limit of Lambda^T (Lambda Lambda^T + sigma2 I)^{-1}.
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(lambda * lambda.transpose());
    const double tol = 1e-8 * es.eigenvalues().maxCoeff();
    MatrixXd pinv_llt = MatrixXd::Zero(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double delta = es.eigenvalues()(j);
      if (delta > tol)
        pinv_llt += es.eigenvectors().col(j) * es.eigenvectors().col(j).transpose() / (delta + 1e-10);
    }
    const MatrixXd left = lambda.transpose() * pinv_llt;
    const MatrixXd right = (lambda.transpose() * lambda).inverse() * lambda.transpose();
    EXPECT_LT(testing::max_abs(left - right), 1e-9);
  }
}

TEST(ZeroNoise, RankDeficientLoadingRejected) {
  PpcaModel<double> m{MatrixXd::Ones(4, 2), VectorXd::Zero(4), 1.0, false};
  EXPECT_THROW(ppca::zero_noise_projection(m, MatrixXd::Zero(1, 4)), InvalidArgument);
}

TEST(PcaBaseline, SpansMleLoading) {
  Rng rng(18);
  const MatrixXd x = ppca_data(7, 3, 0.2, 2000, rng);
  const auto pca = ppca::pca_baseline(x, 3);
  const auto mle = ppca::fit_mle(x, 3);
  EXPECT_LT(max_principal_angle(pca.components, mle.loading), 1e-8);
  EXPECT_MATRIX_NEAR(pca.components.transpose() * pca.components, MatrixXd::Identity(3, 3), 1e-10);
  for (Eigen::Index j = 1; j < 3; ++j) EXPECT_GE(pca.explained_variance(j - 1), pca.explained_variance(j));
}

TEST(PcaBaseline, ReconstructionErrorSpectralIdentity) {
  Rng rng(19);
  const MatrixXd x = ppca_data(6, 2, 0.3, 1500, rng);
  const auto pca = ppca::pca_baseline(x, 2);
  const VectorXd mu = x.colwise().mean().transpose();
  const MatrixXd xc = x.rowwise() - mu.transpose();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(xc.transpose() * xc / static_cast<double>(x.rows()));
  const double expected = static_cast<double>(x.rows()) * es.eigenvalues().head(4).sum();
  EXPECT_LT(std::abs(ppca::reconstruction_error(pca, x) - expected) / expected, 1e-6);
}

TEST(PcaBaseline, AffineSubspaceReconstructsExactly) {
  Rng rng(20);
  const MatrixXd x = (rng.normal_matrix(100, 2) * rng.normal_matrix(2, 5)).rowwise() +
                     rng.normal_vector(5).transpose();
  EXPECT_LT(ppca::reconstruction_error(ppca::pca_baseline(x, 2), x), 1e-10);
}

TEST(PcaBaseline, TransformIsProjection) {
  Rng rng(21);
  const MatrixXd x = ppca_data(5, 2, 0.3, 200, rng);
  const auto pca = ppca::pca_baseline(x, 2);
  const MatrixXd z = ppca::pca_transform(pca, x);
  EXPECT_MATRIX_NEAR(z, (x.rowwise() - pca.offset.transpose()) * pca.components, 1e-12);
}

TEST(LogLikelihood, EqualsFactorAnalysis) {
  Rng rng(22);
  const PpcaModel<double> m{rng.normal_matrix(5, 2), rng.normal_vector(5), 0.4, false};
  const MatrixXd x = rng.normal_matrix(30, 5);
  EXPECT_NEAR(ppca::log_likelihood(m, x), fa::log_likelihood(m.to_factor_model(), x), 1e-10);
}

TEST(LogLikelihood, SinglePointAtMean) {
  const PpcaModel<double> m{MatrixXd::Zero(3, 1), VectorXd::Ones(3), 1.0, false};
  EXPECT_NEAR(ppca::log_likelihood(m, m.offset.transpose()), -1.5 * std::log(2 * M_PI), 1e-13);
}

}  // namespace
}  // namespace latentlab
