#include "latentlab/elbo.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/synthetic.hpp"

#include "test_util.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace latentlab {
namespace {

using fa::FactorModel;

FactorModel<double> model_d2p1() {
  FactorModel<double> m{MatrixXd::Ones(2, 1), VectorXd::Zero(2), VectorXd::Ones(2)};
  return m;
}

std::vector<fa::LatentPosterior<double>> posteriors_of(const FactorModel<double>& m, const MatrixXd& data) {
  std::vector<fa::LatentPosterior<double>> out;
  for (Eigen::Index i = 0; i < data.rows(); ++i) out.push_back(fa::e_step(m, data.row(i).transpose()));
  return out;
}

TEST(FactorModel, ValidateRejectsBadShapes) {
  FactorModel<double> m = model_d2p1();
  m.noise_diag(0) = 0.0;
  EXPECT_THROW(m.validate(), InvalidArgument);
  m = model_d2p1();
  m.offset = VectorXd::Zero(3);
  EXPECT_THROW(m.validate(), DimensionMismatch);
  m = model_d2p1();
  m.loading = MatrixXd::Ones(2, 3);
  EXPECT_THROW(m.validate(), InvalidArgument);
}

TEST(MarginalX, ZeroLoadingGivesNoise) {
  FactorModel<double> m{MatrixXd::Zero(3, 2), VectorXd::LinSpaced(3, 1, 3), VectorXd::LinSpaced(3, 0.5, 1.5)};
  const auto g = fa::marginal_x(m);
  EXPECT_EQ(g.mean(), m.offset);
  EXPECT_MATRIX_NEAR(g.cov(), MatrixXd(m.noise_diag.asDiagonal()), 0.0);
}

TEST(MarginalX, HandComputedCovariance) {
  MatrixXd expected(2, 2);
  expected << 2, 1, 1, 2;
  EXPECT_MATRIX_NEAR(fa::marginal_x(model_d2p1()).cov(), expected, 0.0);
}

TEST(MarginalX, EmpiricalCovarianceOfSamples) {
  Rng rng(1);
  const auto m = random_factor_model(5, 2, rng);
  const MatrixXd x = fa::sample_data(m, 100000, rng);
  const MatrixXd centered = x.rowwise() - x.colwise().mean();
  const MatrixXd emp = centered.transpose() * centered / static_cast<double>(x.rows());
  EXPECT_LT((emp - m.marginal_cov()).norm() / m.marginal_cov().norm(), 0.05);
}

TEST(LogLikelihood, SinglePointAtMean) {
  FactorModel<double> m{MatrixXd::Zero(4, 1), VectorXd::Constant(4, 2.0), VectorXd::Ones(4)};
  EXPECT_NEAR(fa::log_likelihood(m, m.offset.transpose()), -2.0 * std::log(2 * M_PI), 1e-13);
}

TEST(LogLikelihood, SumOfDenseDensities) {
  Rng rng(2);
  const auto m = random_factor_model(4, 2, rng);
  const MatrixXd x = fa::sample_data(m, 30, rng);
  double expected = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    expected += testing::dense_log_density(m.offset, m.marginal_cov(), x.row(i).transpose());
  EXPECT_NEAR(fa::log_likelihood(m, x), expected, 1e-10 * std::abs(expected));
}

TEST(LogLikelihood, TrueModelBeatsPerturbed) {
  Rng rng(3);
  int wins = 0;
  for (int t = 0; t < 100; ++t) {
    const auto truth = random_factor_model(5, 2, rng);
    const MatrixXd x = fa::sample_data(truth, 1000, rng);
    auto perturbed = truth;
    perturbed.loading += 0.5 * rng.normal_matrix(5, 2);
    if (fa::log_likelihood(truth, x) > fa::log_likelihood(perturbed, x)) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST(EStep, ZeroLoadingRecoversPrior) {
  FactorModel<double> m{MatrixXd::Zero(3, 2), VectorXd::Zero(3), VectorXd::Ones(3)};
  const auto post = fa::e_step(m, VectorXd::Constant(3, 5.0));
  EXPECT_MATRIX_NEAR(post.mean, VectorXd::Zero(2), 0.0);
  EXPECT_MATRIX_NEAR(post.cov, MatrixXd::Identity(2, 2), 0.0);
}

TEST(EStep, ScalarCase) {
  FactorModel<double> m{MatrixXd::Ones(1, 1), VectorXd::Zero(1), VectorXd::Ones(1)};
  const auto post = fa::e_step(m, VectorXd::Constant(1, 2.0));
  EXPECT_NEAR(post.mean(0), 1.0, 1e-15);
  EXPECT_NEAR(post.cov(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(post.second_moment(0, 0), 1.5, 1e-15);
}

TEST(EStep, ScalarCaseByNumericalIntegration) {
  // p(z | x) proportional to N(z | 0, 1) N(x | z, 1) on a fine grid.
  const double x = 2.0;
  double mass = 0, first = 0, second = 0;
  for (int i = -40000; i <= 40000; ++i) {
    const double z = i * 2.5e-4;
    const double w = std::exp(-0.5 * z * z - 0.5 * (x - z) * (x - z));
    mass += w;
    first += w * z;
    second += w * z * z;
  }
  FactorModel<double> m{MatrixXd::Ones(1, 1), VectorXd::Zero(1), VectorXd::Ones(1)};
  const auto post = fa::e_step(m, VectorXd::Constant(1, x));
  EXPECT_NEAR(post.mean(0), first / mass, 1e-9);
  EXPECT_NEAR(post.second_moment(0, 0), second / mass, 1e-9);
}

TEST(EStep, AtOffsetMeanIsZero) {
  Rng rng(4);
  const auto m = random_factor_model(6, 3, rng);
  EXPECT_EQ(fa::e_step(m, m.offset).mean, VectorXd::Zero(3));
}

TEST(EStep, MatchesDenseFormulas) {
  Rng rng(5);
  const auto m = random_factor_model(6, 2, rng);
  const VectorXd x = rng.normal_vector(6);
  const MatrixXd c_inv = m.marginal_cov().inverse();
  const auto post = fa::e_step(m, x);
  EXPECT_MATRIX_NEAR(post.mean, m.loading.transpose() * c_inv * (x - m.offset), 1e-12);
  EXPECT_MATRIX_NEAR(post.cov, MatrixXd::Identity(2, 2) - m.loading.transpose() * c_inv * m.loading, 1e-12);
  EXPECT_MATRIX_NEAR(post.second_moment, post.cov + post.mean * post.mean.transpose(), 1e-10);
}

TEST(EStep, CovarianceIndependentOfX) {
  Rng rng(6);
  const auto m = random_factor_model(5, 2, rng);
  const auto a = fa::e_step(m, rng.normal_vector(5));
  const auto b = fa::e_step(m, rng.normal_vector(5));
  EXPECT_EQ(a.cov, b.cov);
  EXPECT_MATRIX_NEAR(a.second_moment - a.mean * a.mean.transpose(), b.second_moment - b.mean * b.mean.transpose(),
                     1e-12);
}

TEST(MStep, DecoupledCase) {
  Rng rng(7);
  const MatrixXd x = rng.normal_matrix(50, 3);
  const VectorXd mu = x.colwise().mean().transpose();
  std::vector<fa::LatentPosterior<double>> posts(50, {VectorXd::Zero(2), MatrixXd::Identity(2, 2),
                                                      MatrixXd::Identity(2, 2)});
  const auto [loading, noise] = fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), mu);
  EXPECT_MATRIX_NEAR(loading, MatrixXd::Zero(3, 2), 0.0);
  const MatrixXd xc = x.rowwise() - mu.transpose();
  EXPECT_MATRIX_NEAR(noise, (xc.transpose() * xc / 50.0).diagonal(), 1e-12);
}

TEST(MStep, ScalarCaseMatchesHandRolledStep) {
  Rng rng(8);
  const MatrixXd x = rng.normal_matrix(40, 1) * 1.7;
  const double mu = x.mean();
  const double lambda = 0.8, psi = 0.6;
  // Independent scalar EM step.
  const double c = lambda * lambda + psi;
  const double v = 1.0 - lambda * lambda / c;
  double sxm = 0, szz = 0;
  std::vector<double> m(40);
  for (int i = 0; i < 40; ++i) {
    m[i] = lambda / c * (x(i) - mu);
    sxm += (x(i) - mu) * m[i];
    szz += v + m[i] * m[i];
  }
  const double lambda_new = sxm / szz;
  double s = 0;
  for (int i = 0; i < 40; ++i) {
    const double r = x(i) - mu;
    s += r * r - 2 * lambda_new * m[i] * r + lambda_new * lambda_new * (v + m[i] * m[i]);
  }
  const double psi_new = s / 40.0;

  FactorModel<double> model{MatrixXd::Constant(1, 1, lambda), VectorXd::Constant(1, mu), VectorXd::Constant(1, psi)};
  const auto posts = posteriors_of(model, x);
  const auto [loading, noise] = fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), model.offset);
  EXPECT_NEAR(loading(0, 0), lambda_new, 1e-12);
  EXPECT_NEAR(noise(0), psi_new, 1e-12);
}

TEST(MStep, OneIterationIncreasesLikelihood) {
  Rng rng(9);
  const auto truth = random_factor_model(6, 2, rng);
  const MatrixXd x = fa::sample_data(truth, 500, rng);
  FactorModel<double> m{0.1 * rng.normal_matrix(6, 2), x.colwise().mean().transpose(), VectorXd::Ones(6)};
  const auto posts = posteriors_of(m, x);
  const auto [loading, noise] = fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), m.offset);
  const FactorModel<double> next{loading, m.offset, noise};
  EXPECT_GT(fa::log_likelihood(next, x), fa::log_likelihood(m, x));
}

TEST(MStep, ExplicitPosteriorsMatchStatisticPath) {
  Rng rng(10);
  const auto m = random_factor_model(5, 2, rng);
  const MatrixXd x = fa::sample_data(m, 100, rng);
  const auto posts = posteriors_of(m, x);
  const auto [loading, noise] = fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), m.offset);
  const auto stats = fa::detail::expected_stats(m, x, false);
  const auto direct = fa::m_step_from_stats(stats);
  EXPECT_MATRIX_NEAR(loading, direct.loading, 1e-11);
  EXPECT_MATRIX_NEAR(noise, direct.s_diag.cwiseMax(fa::kNoiseFloor), 1e-11);
}

TEST(MStep, NoiseFloorApplied) {
  // Data exactly on a line: the residual variance of one coordinate is zero.
  MatrixXd x(4, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8;
  const VectorXd mu = x.colwise().mean().transpose();
  std::vector<fa::LatentPosterior<double>> posts;
  for (int i = 0; i < 4; ++i) {
    VectorXd mean = VectorXd::Constant(1, x(i, 0) - mu(0));
    posts.push_back({mean, MatrixXd::Zero(1, 1), mean * mean.transpose()});
  }
  const auto [loading, noise] = fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), mu);
  EXPECT_NEAR(loading(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(loading(1, 0), 2.0, 1e-12);
  EXPECT_EQ(noise(0), fa::kNoiseFloor);
  EXPECT_EQ(noise(1), fa::kNoiseFloor);
}

TEST(MStep, SingularSecondMomentAdvisesSmallerP) {
  const MatrixXd x = MatrixXd::Ones(3, 3);
  std::vector<fa::LatentPosterior<double>> posts(3, {VectorXd::Zero(2), MatrixXd::Zero(2, 2), MatrixXd::Zero(2, 2)});
  try {
    fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), VectorXd(VectorXd::Ones(3)));
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("smaller p"), std::string::npos);
  }
}

TEST(MStep, PosteriorCountMustMatchRows) {
  const MatrixXd x = MatrixXd::Ones(3, 2);
  std::vector<fa::LatentPosterior<double>> posts(2, {VectorXd::Zero(1), MatrixXd::Identity(1, 1),
                                                     MatrixXd::Identity(1, 1)});
  EXPECT_THROW(fa::m_step(x, std::span<const fa::LatentPosterior<double>>(posts), VectorXd(VectorXd::Ones(2))),
               DimensionMismatch);
}

TEST(FitEm, RecoversKnownModel) {
  Rng rng(11);
  const auto truth = random_factor_model(10, 3, rng);
  const MatrixXd x = fa::sample_data(truth, 10000, rng);
  const auto [fitted, trace] = fa::fit_em(x, 3, {500, 1e-9, 0, false});
  EXPECT_LT((fitted.marginal_cov() - truth.marginal_cov()).norm() / truth.marginal_cov().norm(), 0.10);
  EXPECT_MATRIX_NEAR(fitted.offset, x.colwise().mean().transpose(), 1e-12);
}

TEST(FitEm, TraceNonDecreasing) {
  Rng rng(12);
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index d = 3 + t % 8;
    const Eigen::Index p = 1 + t % std::min<Eigen::Index>(3, d - 1);
    const auto truth = random_factor_model(d, p, rng);
    const MatrixXd x = fa::sample_data(truth, 400, rng);
    const auto [fitted, trace] = fa::fit_em(x, p, {300, 1e-12, static_cast<std::uint64_t>(t), false});
    ASSERT_FALSE(trace.loglik_per_iter.empty());
    for (std::size_t i = 1; i < trace.loglik_per_iter.size(); ++i)
      EXPECT_GE(trace.loglik_per_iter[i], trace.loglik_per_iter[i - 1] - 1e-8) << "dataset " << t << " iter " << i;
  }
}

TEST(FitEm, LiteralSecondMomentBreaksMonotonicity) {
  // Using the posterior covariance alone in place of E[z z^T] is not EM.
  Rng rng(13);
  const auto truth = random_factor_model(6, 2, rng);
  const MatrixXd x = fa::sample_data(truth, 1000, rng);
  FactorModel<double> m{0.1 * rng.normal_matrix(6, 2), x.colwise().mean().transpose(),
                        ((x.rowwise() - x.colwise().mean()).colwise().squaredNorm() / 1000.0).transpose()};
  bool decreased = false;
  double previous = fa::log_likelihood(m, x);
  for (int iter = 0; iter < 50 && !decreased; ++iter) {
    auto stats = fa::detail::expected_stats(m, x, false);
    const auto op = fa::posterior_operator(m);
    stats.second = 1000.0 * op.cov;
    try {
      const auto r = fa::m_step_from_stats(stats);
      m.loading = r.loading;
      m.noise_diag = r.s_diag.cwiseMax(1e-6);
      const double current = fa::log_likelihood(m, x);
      decreased = current < previous - 1e-8;
      previous = current;
    } catch (const Error&) {
      decreased = true;
    }
  }
  EXPECT_TRUE(decreased);
}

TEST(FitEm, CenteredAndUncenteredAgree) {
  Rng rng(14);
  const auto truth = random_factor_model(7, 2, rng);
  const MatrixXd x = fa::sample_data(truth, 2000, rng);
  const auto [a, ta] = fa::fit_em(x, 2, {500, 1e-7, 3, false});
  const auto [b, tb] = fa::fit_em(x, 2, {500, 1e-7, 3, true});
  EXPECT_NEAR(fa::log_likelihood(a, x), fa::log_likelihood(b, x), 1e-8);
  EXPECT_EQ(b.offset, a.offset);
}

TEST(FitEm, ConvergenceFlagAndIterationCount) {
  Rng rng(15);
  const auto truth = random_factor_model(5, 1, rng);
  const MatrixXd x = fa::sample_data(truth, 300, rng);
  const auto [m1, t1] = fa::fit_em(x, 1, {2, 1e-12, 0, false});
  EXPECT_EQ(t1.iterations_run, 2);
  EXPECT_FALSE(t1.converged);
  EXPECT_EQ(t1.loglik_per_iter.size(), 2u);
  const auto [m2, t2] = fa::fit_em(x, 1, {1000, 1e-6, 0, false});
  EXPECT_TRUE(t2.converged);
  EXPECT_LT(t2.iterations_run, 1000);
}

TEST(FitEm, DeterministicPerSeed) {
  Rng rng(16);
  const MatrixXd x = fa::sample_data(random_factor_model(5, 2, rng), 200, rng);
  const auto [a, ta] = fa::fit_em(x, 2, {50, 1e-9, 7, false});
  const auto [b, tb] = fa::fit_em(x, 2, {50, 1e-9, 7, false});
  EXPECT_EQ(a.loading, b.loading);
  EXPECT_EQ(ta.loglik_per_iter, tb.loglik_per_iter);
}

TEST(FitEm, RejectsBadInput) {
  Rng rng(17);
  const MatrixXd x = rng.normal_matrix(10, 3);
  EXPECT_THROW(fa::fit_em(x, 3, {}), InvalidArgument);
  EXPECT_THROW(fa::fit_em(x, 0, {}), InvalidArgument);
  EXPECT_THROW(fa::fit_em(x.topRows(1), 1, {}), InvalidArgument);
  MatrixXd bad = x;
  bad(2, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fa::fit_em(bad, 1, {}), NonFinite);
  EXPECT_THROW(fa::fit_em(x, 1, {0, 1e-7, 0, false}), InvalidArgument);
  EXPECT_THROW(fa::fit_em(x, 1, {10, 0.0, 0, false}), InvalidArgument);
}

TEST(SampleData, ZeroLoadingUnitNoise) {
  Rng rng(18);
  FactorModel<double> m{MatrixXd::Zero(3, 1), VectorXd::Constant(3, 4.0), VectorXd::Ones(3)};
  const MatrixXd x = fa::sample_data(m, 100000, rng);
  EXPECT_LT((x.colwise().mean().transpose() - m.offset).cwiseAbs().maxCoeff(), 0.02);
}

TEST(SampleData, SingleRow) {
  Rng rng(19);
  const MatrixXd x = fa::sample_data(model_d2p1(), 1, rng);
  EXPECT_EQ(x.rows(), 1);
  EXPECT_EQ(x.cols(), 2);
}

TEST(Transform, RowsAtOffsetAreZero) {
  Rng rng(20);
  const auto m = random_factor_model(4, 2, rng);
  const MatrixXd x = m.offset.transpose().replicate(3, 1);
  EXPECT_MATRIX_NEAR(fa::transform(m, x), MatrixXd::Zero(3, 2), 0.0);
}

TEST(Transform, AgreesWithEStep) {
  Rng rng(21);
  const auto m = random_factor_model(5, 2, rng);
  const MatrixXd x = fa::sample_data(m, 20, rng);
  const MatrixXd z = fa::transform(m, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    EXPECT_MATRIX_NEAR(z.row(i).transpose(), fa::e_step(m, x.row(i).transpose()).mean, 1e-12);
}

double correlation(const VectorXd& a, const VectorXd& b) {
  const VectorXd ac = a.array() - a.mean();
  const VectorXd bc = b.array() - b.mean();
  return ac.dot(bc) / (ac.norm() * bc.norm());
}

TEST(Transform, RecoversLatentsFromFittedModel) {
  Rng rng(22);
  auto truth = random_factor_model(10, 2, rng);
  truth.noise_diag.setConstant(0.01);
  SyntheticParams params;
  params.fa_model = truth;
  const auto synth = make_synthetic(SyntheticKind::kFaModel, params, 3000, 23);
  const auto [fitted, trace] = fa::fit_em(synth.dataset.values, 2, {500, 1e-9, 0, false});
  const MatrixXd z = fa::transform(fitted, synth.dataset.values);
  // Align by regressing the true latents on the recovered ones; a rotation
  // leaves each true component almost perfectly explained.
  const MatrixXd& truth_z = synth.truth.latents;
  const MatrixXd coef = z.colPivHouseholderQr().solve(truth_z);
  const MatrixXd aligned = z * coef;
  for (Eigen::Index k = 0; k < 2; ++k) EXPECT_GT(correlation(aligned.col(k), truth_z.col(k)), 0.9);
}

TEST(Transform, FullRankLowNoiseRecoversLatentSubspace) {
  Rng rng(24);
  FactorModel<double> m{rng.normal_matrix(4, 4), rng.normal_vector(4), VectorXd::Constant(4, 1e-8)};
  const MatrixXd z = rng.normal_matrix(200, 4);
  MatrixXd x = z * m.loading.transpose();
  x.rowwise() += m.offset.transpose();
  const MatrixXd recovered = fa::transform(m, x);
  EXPECT_LT(max_principal_angle(recovered, z), 1e-2);
}

TEST(ElboTightness, PosteriorMakesBoundExact) {
  Rng rng(25);
  const auto m = random_factor_model(6, 2, rng);
  const MatrixXd x = fa::sample_data(m, 30, rng);
  const FactorLatentModel<double> latent(m);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto post = fa::e_step(m, x.row(i).transpose());
    const GaussianFull<double> q(post.mean, post.cov);
    EXPECT_NEAR(elbo_exact(latent, q, x.row(i).transpose()), fa::log_likelihood(m, x.row(i)), 1e-8);
  }
}

}  // namespace
}  // namespace latentlab
