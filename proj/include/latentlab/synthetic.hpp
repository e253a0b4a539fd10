#pragma once

#include "latentlab/core.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/io.hpp"
#include "latentlab/rng.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace latentlab {

enum class SyntheticKind { kFaModel, kGaussianMixture, kRing2d };

SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticParams {
  // kFaModel
  std::optional<fa::FactorModel<double>> fa_model;
  // kGaussianMixture: one mean per row, shared isotropic std.
  MatrixXd component_means;
  double component_std = 1.0;
  // kRing2d: radial noise is truncated at 3 standard deviations.
  double radius = 2.0;
  double ring_noise = 0.1;
};

struct GroundTruth {
  std::optional<fa::FactorModel<double>> fa_model;
  MatrixXd latents;              // kFaModel: the z_i, n x p
  MatrixXd component_means;      // kGaussianMixture
  std::vector<int> labels;       // kGaussianMixture
  std::vector<double> angles;    // kRing2d
  double radius = 0.0;
  double ring_noise = 0.0;
};

struct SyntheticData {
  Dataset dataset;
  GroundTruth truth;
};

/// Deterministic per seed. kFaModel draws exactly what fa::sample_data
/// draws from Rng(seed).
SyntheticData make_synthetic(SyntheticKind kind, const SyntheticParams& params, Eigen::Index n, std::uint64_t seed);

/// Loading entries N(0, 1), offset entries N(0, 1), noise uniform in [noise_lo, noise_hi].
fa::FactorModel<double> random_factor_model(Eigen::Index d, Eigen::Index p, Rng& rng, double noise_lo = 0.1,
                                            double noise_hi = 1.0);

/// Random symmetric positive definite k x k matrix A A^T / k + jitter I.
MatrixXd random_spd(Eigen::Index k, Rng& rng, double jitter = 0.1);

}  // namespace latentlab
