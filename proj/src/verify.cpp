#include "latentlab/verify.hpp"

#include "latentlab/autodiff.hpp"
#include "latentlab/elbo.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/gaussian.hpp"
#include "latentlab/linalg.hpp"
#include "latentlab/ppca.hpp"
#include "latentlab/synthetic.hpp"
#include "latentlab/vae.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace latentlab::verify {

namespace {

using nlohmann::json;

class Recorder {
 public:
  explicit Recorder(std::string suite) : suite_(std::move(suite)) {}

  void at_most(const std::string& check, double value, double threshold) {
    results_.push_back({suite_, check, value, threshold, Comparison::kAtMost, value <= threshold});
  }
  void at_least(const std::string& check, double value, double threshold) {
    results_.push_back({suite_, check, value, threshold, Comparison::kAtLeast, value >= threshold});
  }

  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  std::string suite_;
  std::vector<CheckResult> results_;
};

GaussianFull<double> random_gaussian(Eigen::Index k, Rng& rng) {
  return GaussianFull<double>(rng.normal_vector(k), random_spd(k, rng));
}

std::vector<CheckResult> gaussian_suite(std::uint64_t seed) {
  Recorder rec("gaussian");
  Rng rng(seed);

  double min_kl = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 5);
    min_kl = std::min(min_kl, kl_multivariate(random_gaussian(k, rng), random_gaussian(k, rng)));
  }
  rec.at_least("kl_multivariate_nonnegative", min_kl, -1e-12);

  double worst_z = 0.0;
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 5);
    const auto p1 = random_gaussian(k, rng);
    const auto p2 = random_gaussian(k, rng);
    const auto mc = kl_monte_carlo(p1, p2, 100000, rng);
    worst_z = std::max(worst_z, std::abs(mc.estimate - kl_multivariate(p1, p2)) / mc.std_error);
  }
  rec.at_most("kl_monte_carlo_agreement_sigmas", worst_z, 4.0);

  double worst_rel = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 10);
    const auto g = random_gaussian(k, rng);
    const VectorXd x = rng.normal_vector(k);
    const VectorXd diff = x - g.mean();
    const double dense = -0.5 * (static_cast<double>(k) * kLog2Pi + std::log(g.cov().determinant()) +
                                 diff.dot(g.cov().inverse() * diff));
    worst_rel = std::max(worst_rel, std::abs(log_density(g, x) - dense) / std::max(1.0, std::abs(dense)));
  }
  rec.at_most("log_density_vs_dense_inverse", worst_rel, 1e-10);

  JointGaussianBlocks<double> blocks;
  {
    const MatrixXd joint = random_spd(5, rng);
    blocks.mu = rng.normal_vector(3);
    blocks.mu0 = rng.normal_vector(2);
    blocks.s11 = joint.topLeftCorner(3, 3);
    blocks.s12 = joint.topRightCorner(3, 2);
    blocks.s22 = joint.bottomRightCorner(2, 2);
  }
  const MatrixXd draws = sample(blocks.joint(), 100000, rng);
  const MatrixXd xs = draws.leftCols(3).rowwise() - draws.leftCols(3).colwise().mean();
  const MatrixXd zs = draws.rightCols(2).rowwise() - draws.rightCols(2).colwise().mean();
  const MatrixXd coef = (xs.transpose() * xs).ldlt().solve(xs.transpose() * zs).transpose();
  const MatrixXd expected = blocks.s11.ldlt().solve(blocks.s12).transpose();
  rec.at_most("conditional_regression_coefficients", (coef - expected).cwiseAbs().maxCoeff(), 0.05);
  return rec.take();
}

std::vector<CheckResult> fa_suite(std::uint64_t seed) {
  Recorder rec("fa");
  Rng rng(seed);

  double worst_step = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 5; ++t) {
    const Eigen::Index d = 4 + t;
    const Eigen::Index p = 1 + t % 3;
    const auto truth = random_factor_model(d, p, rng);
    const MatrixXd data = fa::sample_data(truth, 1000, rng);
    const auto [model, trace] = fa::fit_em(data, p, {200, 1e-10, seed + static_cast<std::uint64_t>(t), false});
    for (std::size_t i = 1; i < trace.loglik_per_iter.size(); ++i)
      worst_step = std::min(worst_step, trace.loglik_per_iter[i] - trace.loglik_per_iter[i - 1]);
  }
  rec.at_least("em_loglik_monotone_min_step", worst_step, -1e-8);

  const auto truth = random_factor_model(10, 3, rng);
  const MatrixXd data = fa::sample_data(truth, 10000, rng);
  const auto [fitted, trace] = fa::fit_em(data, 3, {500, 1e-9, seed, false});
  const MatrixXd c_true = truth.marginal_cov();
  rec.at_most("recovery_rel_frobenius", (fitted.marginal_cov() - c_true).norm() / c_true.norm(), 0.10);

  const auto [centered, trace_c] = fa::fit_em(data, 3, {500, 1e-9, seed, true});
  rec.at_most("centered_vs_uncentered_loglik",
              std::abs(fa::log_likelihood(centered, data) - fa::log_likelihood(fitted, data)), 1e-8);

  const FactorLatentModel<double> latent(fitted);
  double worst_gap = 0.0;
  for (Eigen::Index i = 0; i < 50; ++i) {
    const VectorXd x = data.row(i).transpose();
    worst_gap = std::max(worst_gap, std::abs(elbo_exact(latent, latent.posterior(x), x) -
                                             fa::log_likelihood(fitted, data.row(i))));
  }
  rec.at_most("elbo_tight_at_posterior", worst_gap, 1e-8);
  return rec.take();
}

std::vector<CheckResult> ppca_suite(std::uint64_t seed) {
  Recorder rec("ppca");
  Rng rng(seed);
  const auto truth = random_factor_model(8, 2, rng, 0.2, 0.2);
  const MatrixXd data = fa::sample_data(truth, 10000, rng);

  const auto mle = ppca::fit_mle(data, 2);
  Eigen::SelfAdjointEigenSolver<MatrixXd> ref(sample_covariance(data, column_mean(data)));
  const double trailing = ref.eigenvalues().head(6).mean();  // ascending order
  rec.at_most("sigma2_trailing_eigen_mean", std::abs(mle.sigma2 - trailing), 1e-10);

  const auto [em, trace] = ppca::fit_em(data, 2, {500, 1e-14, seed, false});
  rec.at_most("mle_vs_em_principal_angle", max_principal_angle(mle.loading, em.loading), 1e-3);
  rec.at_most("mle_vs_em_sigma2_rel", std::abs(em.sigma2 - mle.sigma2) / mle.sigma2, 1e-3);
  rec.at_least("mle_loglik_minus_em_loglik", ppca::log_likelihood(mle, data) - ppca::log_likelihood(em, data), -1e-6);

  const auto eig = ppca::covariance_eigen(data);
  const MatrixXd s_x = sample_covariance(data, column_mean(data));
  const MatrixXd up = eig.vectors.leftCols(2);
  rec.at_most("eigen_problem_residual", (s_x * up - up * eig.values.head(2).asDiagonal()).norm(), 1e-6);

  double worst_woodbury = 0.0;
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index d = 5 + 5 * t;
    ppca::PpcaModel<double> m{rng.normal_matrix(d, 3), rng.normal_vector(d), 0.1 + rng.uniform(), false};
    MatrixXd c = m.loading * m.loading.transpose();
    c.diagonal().array() += m.sigma2;
    worst_woodbury = std::max(worst_woodbury, (c * ppca::inverse_c(m) - MatrixXd::Identity(d, d)).norm());
  }
  rec.at_most("woodbury_identity_frobenius", worst_woodbury, 1e-9);

  ppca::PpcaModel<double> sharp{rng.normal_matrix(6, 2), rng.normal_vector(6), 1e-10, false};
  const MatrixXd points = rng.normal_matrix(20, 6);
  const MatrixXd projected = ppca::zero_noise_projection(sharp, points);
  double worst_limit = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    worst_limit = std::max(worst_limit, (ppca::posterior(sharp, points.row(i).transpose()).mean() -
                                         projected.row(i).transpose()).cwiseAbs().maxCoeff());
  rec.at_most("zero_noise_limit_posterior_mean", worst_limit, 1e-4);
  return rec.take();
}

std::vector<CheckResult> elbo_suite(std::uint64_t seed) {
  Recorder rec("elbo");
  Rng rng(seed);
  double worst_violation = -std::numeric_limits<double>::infinity();
  double worst_gap = 0.0;
  double worst_decomposition = 0.0;
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index d = 2 + t % 5;
    const Eigen::Index p = 1 + t % (d - 1);
    const FactorLatentModel<double> m(random_factor_model(d, p, rng));
    const VectorXd x = rng.normal_vector(d) * 2.0;
    const auto q = random_gaussian(p, rng);
    const double evidence = m.log_evidence(x);
    const double bound = elbo_exact(m, q, x);
    worst_violation = std::max(worst_violation, bound - evidence);
    worst_gap = std::max(worst_gap, std::abs(em_round(m, x).gap));
    worst_decomposition =
        std::max(worst_decomposition, std::abs(evidence - (bound + kl_multivariate(q, m.posterior(x)))));
  }
  rec.at_most("elbo_minus_evidence", worst_violation, 1e-10);
  rec.at_most("em_round_gap", worst_gap, 1e-10);
  rec.at_most("decomposition_identity", worst_decomposition, 1e-10);

  double worst_z = 0.0;
  for (int t = 0; t < 5; ++t) {
    const FactorLatentModel<double> m(random_factor_model(4, 2, rng));
    const VectorXd x = rng.normal_vector(4);
    const auto q = random_gaussian(2, rng);
    const auto mc = elbo_joint_mc(m, q, x, 20000, rng);
    worst_z = std::max(worst_z, std::abs(mc.estimate - elbo_exact(m, q, x)) / mc.std_error);
  }
  rec.at_most("joint_mc_agreement_sigmas", worst_z, 4.0);
  return rec.take();
}

ad::Var network_loss(const ad::Mlp& shape, ad::Tape& tape, std::span<const ad::Var> params, const ad::Tensor& input) {
  const std::size_t layers = shape.layers.size();
  const ad::Var x = tape.constant(input);
  const ad::Var out = ad::apply(shape, tape, params.subspan(0, layers), params.subspan(layers, layers), x);
  return tape.add(tape.sum(tape.square(out)), tape.sum(tape.exp(tape.scale(out, 0.3))));
}

std::vector<ad::Tensor> flatten(const ad::Mlp& net) {
  std::vector<ad::Tensor> params;
  for (const auto& l : net.layers) params.push_back(l.weights);
  for (const auto& l : net.layers) params.push_back(l.bias);
  return params;
}

std::vector<CheckResult> autodiff_suite(std::uint64_t seed) {
  Recorder rec("autodiff");
  Rng rng(seed);
  const ad::Activation acts[] = {ad::Activation::kTanh, ad::Activation::kRelu, ad::Activation::kSoftplus,
                                 ad::Activation::kIdentity};
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const int depth = 1 + t % 3;
    std::vector<Eigen::Index> dims{3};
    std::vector<ad::Activation> activations;
    for (int l = 0; l < depth; ++l) {
      dims.push_back(2 + static_cast<Eigen::Index>(rng.uniform() * 6));
      activations.push_back(acts[(t + l) % 4]);
    }
    const ad::Mlp net = ad::Mlp::random(dims, activations, rng);
    const ad::Tensor input = rng.normal_matrix(4, 3);
    const auto params = flatten(net);
    worst = std::max(worst, ad::grad_check(
                                [&](ad::Tape& tape, std::span<const ad::Var> vars) {
                                  return network_loss(net, tape, vars, input);
                                },
                                params, 1e-5));
  }
  rec.at_most("mlp_gradient_vs_finite_difference", worst, 1e-5);

  ad::Tensor p = ad::Tensor::Ones(1, 4);
  for (int i = 0; i < 100; ++i) {
    ad::Tensor g = 2.0 * p;
    ad::sgd_step(std::span<ad::Tensor>(&p, 1), std::span<const ad::Tensor>(&g, 1), 0.1);
  }
  rec.at_most("sgd_quadratic_bowl_norm", p.norm(), 1e-8);
  return rec.take();
}

std::vector<CheckResult> vae_suite(std::uint64_t seed) {
  Recorder rec("vae");
  Rng rng(seed);
  const auto model = vae::VaeModel::create(3, 5, 2, rng);
  const VectorXd x = rng.normal_vector(3);
  const auto t1 = vae::elbo_type1(model, x, 10000, rng);
  const auto t2 = vae::elbo_type2_mc(model, x, 10000, rng);
  const auto ta = vae::elbo_type2_analytic(model, x, 10000, rng);
  auto sigmas = [](const vae::ElboEstimate& a, const vae::ElboEstimate& b) {
    return std::abs(a.value - b.value) / std::hypot(a.std_error, b.std_error);
  };
  rec.at_most("estimator_agreement_sigmas",
              std::max({sigmas(t1, t2), sigmas(t1, ta), sigmas(t2, ta)}), 4.0);

  const ad::Tensor x_rows = rng.normal_matrix(4, 3);
  const ad::Tensor eps = rng.normal_matrix(4, 2);
  const ad::Tensor eps_kl = rng.normal_matrix(4, 2);
  std::vector<ad::Tensor> params;
  for (const ad::Mlp* net : {&model.encoder_trunk, &model.head_mean, &model.head_logvar, &model.decoder}) {
    const auto flat = flatten(*net);
    params.insert(params.end(), flat.begin(), flat.end());
  }
  double worst = 0.0;
  for (const auto type : {vae::ElboType::kType1, vae::ElboType::kType2Mc, vae::ElboType::kType2Analytic}) {
    worst = std::max(worst, ad::grad_check(
                                [&](ad::Tape& tape, std::span<const ad::Var> vars) {
                                  vae::VaeVars bound;
                                  std::size_t offset = 0;
                                  auto take = [&](const ad::Mlp& net, ad::MlpBinding& b) {
                                    const std::size_t n = net.layers.size();
                                    b.weights.assign(vars.begin() + offset, vars.begin() + offset + n);
                                    b.biases.assign(vars.begin() + offset + n, vars.begin() + offset + 2 * n);
                                    offset += 2 * n;
                                  };
                                  take(model.encoder_trunk, bound.trunk);
                                  take(model.head_mean, bound.mean);
                                  take(model.head_logvar, bound.logvar);
                                  take(model.decoder, bound.decoder);
                                  return vae::build_elbo_graph(tape, model, bound, x_rows, eps, &eps_kl, type, 0.25)
                                      .objective;
                                },
                                params, 1e-5));
  }
  rec.at_most("elbo_gradient_vs_finite_difference", worst, 1e-4);

  SyntheticParams ring;
  const auto ds = make_synthetic(SyntheticKind::kRing2d, ring, 256, seed);
  vae::TrainConfig config;
  config.epochs = 20;
  config.seed = seed;
  config.lr_encoder = config.lr_decoder = config.joint_lr = 5e-3;
  Rng init_rng(seed + 1);
  const auto init = vae::VaeModel::create(2, 8, 1, init_rng);
  const auto trained = vae::train_backprop(init, ds.dataset.values, config);
  rec.at_least("training_elbo_gain", trained.trace.back().elbo_mean - trained.trace.front().elbo_mean, 0.0);
  return rec.take();
}

}  // namespace

json CheckResult::to_json() const {
  return {{"suite", suite},
          {"check", check},
          {"value", value},
          {"threshold", threshold},
          {"comparison", comparison == Comparison::kAtMost ? "<=" : ">="},
          {"pass", passed}};
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"gaussian", "fa", "ppca", "elbo", "autodiff", "vae"};
  return names;
}

std::vector<CheckResult> run_suite(const std::string& suite, std::uint64_t seed) {
  static const std::vector<std::pair<std::string, std::function<std::vector<CheckResult>(std::uint64_t)>>> suites{
      {"gaussian", gaussian_suite}, {"fa", fa_suite},           {"ppca", ppca_suite},
      {"elbo", elbo_suite},         {"autodiff", autodiff_suite}, {"vae", vae_suite}};
  std::vector<CheckResult> out;
  bool matched = false;
  for (const auto& [name, fn] : suites) {
    if (suite == "all" || suite == name) {
      matched = true;
      auto part = fn(seed);
      out.insert(out.end(), part.begin(), part.end());
    }
  }
  if (!matched) throw InvalidArgument("unknown verify suite '" + suite + "'");
  return out;
}

}  // namespace latentlab::verify
