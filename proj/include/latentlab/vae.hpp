#pragma once

#include "latentlab/autodiff.hpp"
#include "latentlab/core.hpp"
#include "latentlab/gaussian.hpp"
#include "latentlab/rng.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace latentlab::vae {

using ad::Tensor;

enum class ElboType { kType1, kType2Mc, kType2Analytic };

const char* elbo_type_name(ElboType type);
ElboType parse_elbo_type(const std::string& name);

/// Gaussian encoder q(z|x) = N(head_mean(trunk(x)), diag(exp(head_logvar(trunk(x))))),
/// decoder x_hat = decoder(z) with likelihood N(x_hat, I), prior N(0, I).
struct VaeModel {
  ad::Mlp encoder_trunk;  // d -> h
  ad::Mlp head_mean;      // h -> p
  ad::Mlp head_logvar;    // h -> p
  ad::Mlp decoder;        // p -> d
  double kl_weight = 1.0;

  Eigen::Index d() const { return encoder_trunk.in_dim(); }
  Eigen::Index h() const { return encoder_trunk.out_dim(); }
  Eigen::Index p() const { return head_mean.out_dim(); }

  void validate() const;
  GaussianFull<double> prior() const { return GaussianFull<double>::standard(p()); }

  /// tanh trunk, linear heads, decoder p -> h (tanh) -> d (linear);
  /// weights N(0, 1/fan_in), zero biases.
  static VaeModel create(Eigen::Index d, Eigen::Index h, Eigen::Index p, Rng& rng);
  /// Identity activations throughout with a single linear decoder layer.
  static VaeModel create_linear(Eigen::Index d, Eigen::Index h, Eigen::Index p, Rng& rng);
  /// Same architecture as create() with every weight and bias zero.
  static VaeModel zeros(Eigen::Index d, Eigen::Index h, Eigen::Index p);
};

/// value = recon_term - kl_weight * kl_term.
struct ElboEstimate {
  double value = 0.0;
  double recon_term = 0.0;
  double kl_term = 0.0;
  Eigen::Index n_samples = 0;
  double std_error = 0.0;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  int mc_samples = 1;
  double lr_encoder = 1e-3;
  double lr_decoder = 1e-3;
  double joint_lr = 1e-3;
  ElboType elbo_type = ElboType::kType2Analytic;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double elbo_mean = 0.0;
  double recon_mean = 0.0;
  double kl_mean = 0.0;
};

struct TrainResult {
  VaeModel model;
  std::vector<EpochRecord> trace;
};

GaussianDiag<double> encode(const VaeModel& m, const VectorXd& x);

struct ReparamSample {
  MatrixXd z;    // l x p
  MatrixXd eps;  // l x p, the standard-normal draws behind z
};

/// z_j = mean + sqrt(var) * eps_j.
ReparamSample reparam_sample(const GaussianDiag<double>& q, Eigen::Index l, Rng& rng);

VectorXd decode(const VaeModel& m, const VectorXd& z);

/// log N(x | x_hat, I).
double decoder_log_likelihood(const VectorXd& x, const VectorXd& x_hat);

ElboEstimate elbo_type1(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng);
ElboEstimate elbo_type2_mc(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng);
ElboEstimate elbo_type2_analytic(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng);
ElboEstimate elbo(const VaeModel& m, const VectorXd& x, ElboType type, Eigen::Index l, Rng& rng);

/// Per-point ELBO averaged over the rows of `data`, l samples per point.
ElboEstimate mean_elbo(const VaeModel& m, const MatrixXd& data, ElboType type, Eigen::Index l, Rng& rng);

/// Tape handles for every parameter of a VaeModel.
struct VaeVars {
  ad::MlpBinding trunk;
  ad::MlpBinding mean;
  ad::MlpBinding logvar;
  ad::MlpBinding decoder;
};

VaeVars place(const VaeModel& m, ad::Tape& tape, bool encoder_grad, bool decoder_grad);

struct ElboGraph {
  ad::Var recon_rows;  // n x 1, log p(x | z)
  ad::Var kl_rows;     // n x 1, KL contribution (sampled or closed form)
  ad::Var objective;   // 1 x 1, row_weight * sum(recon - kl_weight * kl)
};

/// Records the ELBO of each row of `x_rows` given frozen draws `eps` (one
/// row per data row). Type2Mc reads its KL samples from `eps_kl`.
ElboGraph build_elbo_graph(ad::Tape& tape, const VaeModel& m, const VaeVars& vars, const Tensor& x_rows,
                           const Tensor& eps, const Tensor* eps_kl, ElboType type, double row_weight);

/// Alternating training: per mini-batch an encoder ascent step with lr_encoder,
/// then a decoder ascent step with lr_decoder on the refreshed ELBO.
TrainResult train_em(const VaeModel& init, const MatrixXd& data, const TrainConfig& config);

/// Joint descent on the negative ELBO with joint_lr.
TrainResult train_backprop(const VaeModel& init, const MatrixXd& data, const TrainConfig& config);

/// encode -> one reparameterized draw -> decode.
VectorXd reconstruct(const VaeModel& m, const VectorXd& x, Rng& rng);

/// n rows decoded from z ~ N(0, I); n = 0 gives an empty 0 x d matrix.
MatrixXd generate(const VaeModel& m, Eigen::Index n, Rng& rng);

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace latentlab::vae
