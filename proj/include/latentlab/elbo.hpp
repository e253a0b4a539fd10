#pragma once

#include "latentlab/core.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/gaussian.hpp"
#include "latentlab/ppca.hpp"
#include "latentlab/rng.hpp"

#include <cmath>
#include <concepts>
#include <utility>

namespace latentlab {

/// A latent-variable model whose evidence and posterior are available in
/// closed form: log p(x, z), log p(x), p(z | x) and draws from p(z).
template <typename M>
concept TractableLatentModel = requires(const M& m, const Vector<typename M::Scalar>& v, Rng& rng) {
  typename M::Scalar;
  { m.latent_dim() } -> std::convertible_to<Eigen::Index>;
  { m.log_joint(v, v) } -> std::convertible_to<typename M::Scalar>;
  { m.log_evidence(v) } -> std::convertible_to<typename M::Scalar>;
  { m.posterior(v) } -> std::same_as<GaussianFull<typename M::Scalar>>;
  { m.sample_prior(rng) } -> std::same_as<Vector<typename M::Scalar>>;
};

/// Exposes a factor analysis model (and, through its isotropic special
/// case, a PPCA model) as a TractableLatentModel.
template <typename ScalarT>
class FactorLatentModel {
 public:
  using Scalar = ScalarT;

  explicit FactorLatentModel(fa::FactorModel<Scalar> model)
      : model_(std::move(model)), op_(fa::posterior_operator(model_)), evidence_(fa::marginal_x(model_)) {}

  explicit FactorLatentModel(const ppca::PpcaModel<Scalar>& model) : FactorLatentModel(model.to_factor_model()) {}

  const fa::FactorModel<Scalar>& model() const { return model_; }
  Eigen::Index latent_dim() const { return model_.p(); }
  Eigen::Index data_dim() const { return model_.d(); }

  Scalar log_joint(const Vector<Scalar>& x, const Vector<Scalar>& z) const {
    check_dim("log_joint x", model_.d(), x.size());
    check_dim("log_joint z", model_.p(), z.size());
    const GaussianDiag<Scalar> likelihood(model_.loading * z + model_.offset, model_.noise_diag);
    const Scalar prior = Scalar(-0.5) * (static_cast<Scalar>(z.size()) * Scalar(kLog2Pi) + z.squaredNorm());
    return log_density(likelihood, x) + prior;
  }

  Scalar log_evidence(const Vector<Scalar>& x) const { return log_density(evidence_, x); }

  GaussianFull<Scalar> posterior(const Vector<Scalar>& x) const {
    auto post = fa::e_step(op_, model_.offset, x);
    return GaussianFull<Scalar>(std::move(post.mean), post.cov);
  }

  Vector<Scalar> sample_prior(Rng& rng) const { return rng.normal_vector<Scalar>(model_.p()); }

 private:
  fa::FactorModel<Scalar> model_;
  fa::PosteriorOperator<Scalar> op_;
  GaussianFull<Scalar> evidence_;
};

/// log p(x) - KL(q || p(z | x)).
template <TractableLatentModel M>
typename M::Scalar elbo_exact(const M& m, const GaussianFull<typename M::Scalar>& q,
                              const Vector<typename M::Scalar>& x) {
  check_dim("elbo_exact q", m.latent_dim(), q.dim());
  return m.log_evidence(x) - kl_multivariate(q, m.posterior(x));
}

/// Monte-Carlo estimate of E_q[log p(x, z) - log q(z)].
template <TractableLatentModel M>
MonteCarloEstimate<typename M::Scalar> elbo_joint_mc(const M& m, const GaussianFull<typename M::Scalar>& q,
                                                     const Vector<typename M::Scalar>& x, Eigen::Index n, Rng& rng) {
  using Scalar = typename M::Scalar;
  check_dim("elbo_joint_mc q", m.latent_dim(), q.dim());
  if (n < 100) throw InvalidArgument("elbo_joint_mc: n must be at least 100");
  const Matrix<Scalar> z = sample(q, n, rng);
  const Vector<Scalar> log_q = log_density_rows(q, z);
  Vector<Scalar> terms(n);
  for (Eigen::Index j = 0; j < n; ++j) terms(j) = m.log_joint(x, z.row(j).transpose()) - log_q(j);
  const Scalar mean = terms.mean();
  const Scalar var = (terms.array() - mean).square().sum() / static_cast<Scalar>(n - 1);
  return {mean, std::sqrt(var / static_cast<Scalar>(n))};
}

template <typename Scalar>
struct EmRoundResult {
  GaussianFull<Scalar> q_new;
  Scalar gap;
};

/// E-step of variational EM: q <- p(z | x), after which the bound is tight.
template <TractableLatentModel M>
EmRoundResult<typename M::Scalar> em_round(const M& m, const Vector<typename M::Scalar>& x) {
  auto q = m.posterior(x);
  const auto gap = m.log_evidence(x) - elbo_exact(m, q, x);
  return {std::move(q), gap};
}

}  // namespace latentlab
