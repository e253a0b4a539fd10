#include "latentlab/synthetic.hpp"

#include <cmath>
#include <numbers>

namespace latentlab {

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "fa_model") return SyntheticKind::kFaModel;
  if (name == "gaussian_mixture") return SyntheticKind::kGaussianMixture;
  if (name == "ring2d") return SyntheticKind::kRing2d;
  throw InvalidArgument("unknown synthetic dataset kind '" + name + "'");
}

SyntheticData make_synthetic(SyntheticKind kind, const SyntheticParams& params, Eigen::Index n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("make_synthetic: n must be at least 1");
  Rng rng(seed);
  SyntheticData out;
  switch (kind) {
    case SyntheticKind::kFaModel: {
      if (!params.fa_model) throw InvalidArgument("make_synthetic: fa_model kind needs a FactorModel");
      const auto& model = *params.fa_model;
      model.validate();
      // Same draw order as fa::sample_data: all latents, then all noise.
      out.truth.latents = rng.normal_matrix(n, model.p());
      Rng replay(seed);
      out.dataset.values = fa::sample_data(model, n, replay);
      out.truth.fa_model = model;
      break;
    }
    case SyntheticKind::kGaussianMixture: {
      const MatrixXd& means = params.component_means;
      if (means.rows() < 1 || means.cols() < 1) throw InvalidArgument("make_synthetic: mixture needs component means");
      if (!(params.component_std > 0)) throw InvalidArgument("make_synthetic: component_std must be positive");
      out.dataset.values.resize(n, means.cols());
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(rng.uniform() * static_cast<double>(means.rows())),
                                              means.rows() - 1);
        out.truth.labels.push_back(static_cast<int>(k));
        for (Eigen::Index j = 0; j < means.cols(); ++j)
          out.dataset.values(i, j) = means(k, j) + params.component_std * rng.normal();
      }
      out.truth.component_means = means;
      break;
    }
    case SyntheticKind::kRing2d: {
      if (!(params.radius > 0) || !(params.ring_noise >= 0))
        throw InvalidArgument("make_synthetic: ring needs radius > 0 and noise >= 0");
      out.dataset.values.resize(n, 2);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double angle = 2.0 * std::numbers::pi * rng.uniform();
        double e = rng.normal();
        while (std::abs(e) > 3.0) e = rng.normal();
        const double r = params.radius + params.ring_noise * e;
        out.dataset.values(i, 0) = r * std::cos(angle);
        out.dataset.values(i, 1) = r * std::sin(angle);
        out.truth.angles.push_back(angle);
      }
      out.truth.radius = params.radius;
      out.truth.ring_noise = params.ring_noise;
      break;
    }
  }
  return out;
}

fa::FactorModel<double> random_factor_model(Eigen::Index d, Eigen::Index p, Rng& rng, double noise_lo,
                                            double noise_hi) {
  fa::FactorModel<double> m;
  m.loading = rng.normal_matrix(d, p);
  m.offset = rng.normal_vector(d);
  m.noise_diag.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) m.noise_diag(i) = noise_lo + (noise_hi - noise_lo) * rng.uniform();
  return m;
}

MatrixXd random_spd(Eigen::Index k, Rng& rng, double jitter) {
  const MatrixXd a = rng.normal_matrix(k, k);
  MatrixXd s = a * a.transpose() / static_cast<double>(k);
  s.diagonal().array() += jitter;
  return (s + s.transpose()) / 2.0;
}

}  // namespace latentlab
