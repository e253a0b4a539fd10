#include "latentlab/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace latentlab::vae {

namespace {

using ad::Activation;
using ad::Mlp;
using ad::Tape;
using ad::Var;

Tensor repeat_rows(const MatrixXd& x_rows, Eigen::Index times) {
  Tensor out(x_rows.rows() * times, x_rows.cols());
  for (Eigen::Index i = 0; i < x_rows.rows(); ++i)
    for (Eigen::Index j = 0; j < times; ++j) out.row(i * times + j) = x_rows.row(i);
  return out;
}

Tensor as_row(const VectorXd& v) { return v.transpose(); }

double sample_variance(const VectorXd& v) {
  if (v.size() < 2) return 0.0;
  return (v.array() - v.mean()).square().sum() / static_cast<double>(v.size() - 1);
}

void check_finite_or_throw(const Tensor& t, const char* what) {
  if (!t.allFinite()) throw NonFinite(std::string(what) + ": non-finite activation");
}

struct RowTerms {
  VectorXd recon;
  VectorXd kl;
};

RowTerms evaluate_rows(const VaeModel& m, const Tensor& x_rows, const Tensor& eps, const Tensor* eps_kl,
                       ElboType type) {
  Tape tape;
  const VaeVars vars = place(m, tape, false, false);
  const ElboGraph g = build_elbo_graph(tape, m, vars, x_rows, eps, eps_kl, type, 1.0);
  return {tape.value(g.recon_rows).col(0), tape.value(g.kl_rows).col(0)};
}

ElboEstimate estimate_single(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng, ElboType type) {
  m.validate();
  check_dim("elbo x", m.d(), x.size());
  if (l < 1) throw InvalidArgument("elbo: sample count must be at least 1");
  const Tensor x_rows = repeat_rows(as_row(x), l);
  const Tensor eps = rng.normal_matrix(l, m.p());
  Tensor eps_kl;
  if (type == ElboType::kType2Mc) eps_kl = rng.normal_matrix(l, m.p());
  const RowTerms rows = evaluate_rows(m, x_rows, eps, type == ElboType::kType2Mc ? &eps_kl : nullptr, type);

  const double w = m.kl_weight;
  const double count = static_cast<double>(l);
  ElboEstimate est;
  est.n_samples = l;
  est.recon_term = rows.recon.mean();
  est.kl_term = rows.kl.mean();
  est.value = est.recon_term - w * est.kl_term;
  switch (type) {
    case ElboType::kType1: {
      const VectorXd combined = rows.recon - w * rows.kl;
      est.std_error = std::sqrt(sample_variance(combined) / count);
      break;
    }
    case ElboType::kType2Mc:
      est.std_error = std::sqrt((sample_variance(rows.recon) + w * w * sample_variance(rows.kl)) / count);
      break;
    case ElboType::kType2Analytic:
      est.std_error = std::sqrt(sample_variance(rows.recon) / count);
      break;
  }
  return est;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

struct BatchInputs {
  Tensor x_rows;
  Tensor eps;
  Tensor eps_kl;
};

BatchInputs draw_batch(const MatrixXd& data, std::span<const std::size_t> batch, const TrainConfig& config,
                       Eigen::Index p, Rng& rng) {
  const Eigen::Index l = config.mc_samples;
  MatrixXd picked(static_cast<Eigen::Index>(batch.size()), data.cols());
  for (std::size_t i = 0; i < batch.size(); ++i) picked.row(static_cast<Eigen::Index>(i)) = data.row(static_cast<Eigen::Index>(batch[i]));
  BatchInputs in;
  in.x_rows = repeat_rows(picked, l);
  in.eps = rng.normal_matrix(in.x_rows.rows(), p);
  if (config.elbo_type == ElboType::kType2Mc) in.eps_kl = rng.normal_matrix(in.x_rows.rows(), p);
  return in;
}

struct BatchSums {
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

/// One descent step on -ELBO for the selected parameter groups. Returns the
/// batch sums measured before the update.
BatchSums descend(VaeModel& m, const BatchInputs& in, const TrainConfig& config, bool encoder, bool decoder,
                  double lr) {
  const double row_weight = 1.0 / static_cast<double>(config.mc_samples);
  Tape tape;
  const VaeVars vars = place(m, tape, encoder, decoder);
  const ElboGraph g = build_elbo_graph(tape, m, vars, in.x_rows, in.eps,
                                       config.elbo_type == ElboType::kType2Mc ? &in.eps_kl : nullptr, config.elbo_type,
                                       row_weight);
  BatchSums sums;
  sums.elbo = tape.value(g.objective)(0, 0);
  sums.recon = tape.value(g.recon_rows).sum() * row_weight;
  sums.kl = tape.value(g.kl_rows).sum() * row_weight;
  tape.backward(g.objective, Tensor::Constant(1, 1, -1.0));
  if (encoder) {
    ad::sgd_step(m.encoder_trunk, ad::collect_gradients(tape, vars.trunk), lr);
    ad::sgd_step(m.head_mean, ad::collect_gradients(tape, vars.mean), lr);
    ad::sgd_step(m.head_logvar, ad::collect_gradients(tape, vars.logvar), lr);
  }
  if (decoder) ad::sgd_step(m.decoder, ad::collect_gradients(tape, vars.decoder), lr);
  return sums;
}

enum class Schedule { kAlternating, kJoint };

TrainResult train(const VaeModel& init, const MatrixXd& data, const TrainConfig& config, Schedule schedule) {
  config.validate();
  init.validate();
  check_dim("train data columns", init.d(), data.cols());
  if (data.rows() < 1) throw InvalidArgument("train: empty dataset");
  if (!data.allFinite()) throw NonFinite("train: data contains non-finite values");

  TrainResult result{init, {}};
  VaeModel& m = result.model;
  Rng rng(config.seed);
  const auto n = static_cast<std::size_t>(data.rows());
  const auto b = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    BatchSums total;
    int batch_index = 0;
    for (std::size_t start = 0; start < n; start += b, ++batch_index) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(b, n - start));
      try {
        if (schedule == Schedule::kAlternating) {
          const BatchInputs e_in = draw_batch(data, batch, config, m.p(), rng);
          const BatchSums s = descend(m, e_in, config, true, false, config.lr_encoder);
          const BatchInputs m_in = draw_batch(data, batch, config, m.p(), rng);
          descend(m, m_in, config, false, true, config.lr_decoder);
          total.elbo += s.elbo;
          total.recon += s.recon;
          total.kl += s.kl;
        } else {
          const BatchInputs in = draw_batch(data, batch, config, m.p(), rng);
          const BatchSums s = descend(m, in, config, true, true, config.joint_lr);
          total.elbo += s.elbo;
          total.recon += s.recon;
          total.kl += s.kl;
        }
      } catch (const NonFinite& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), epoch, batch_index);
      }
    }
    const double count = static_cast<double>(n);
    result.trace.push_back({epoch + 1, total.elbo / count, total.recon / count, total.kl / count});
  }
  return result;
}

}  // namespace

const char* elbo_type_name(ElboType type) {
  switch (type) {
    case ElboType::kType1: return "type1";
    case ElboType::kType2Mc: return "type2-mc";
    case ElboType::kType2Analytic: return "type2-analytic";
  }
  return "type2-analytic";
}

ElboType parse_elbo_type(const std::string& name) {
  if (name == "type1") return ElboType::kType1;
  if (name == "type2-mc" || name == "type2_mc") return ElboType::kType2Mc;
  if (name == "type2-analytic" || name == "type2_analytic") return ElboType::kType2Analytic;
  throw InvalidArgument("unknown ELBO type '" + name + "'");
}

void VaeModel::validate() const {
  encoder_trunk.validate();
  head_mean.validate();
  head_logvar.validate();
  decoder.validate();
  if (head_mean.in_dim() != h() || head_logvar.in_dim() != h())
    throw InvalidArgument("VaeModel: encoder heads do not match trunk width");
  if (head_logvar.out_dim() != p()) throw InvalidArgument("VaeModel: encoder heads disagree on latent dimension");
  if (decoder.in_dim() != p() || decoder.out_dim() != d())
    throw InvalidArgument("VaeModel: decoder must map the latent dimension to the data dimension");
  if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) throw InvalidArgument("VaeModel: kl_weight must be >= 0");
}

VaeModel VaeModel::create(Eigen::Index d, Eigen::Index h, Eigen::Index p, Rng& rng) {
  VaeModel m;
  m.encoder_trunk = Mlp::random({d, h}, {Activation::kTanh}, rng);
  m.head_mean = Mlp::random({h, p}, {Activation::kIdentity}, rng);
  m.head_logvar = Mlp::random({h, p}, {Activation::kIdentity}, rng);
  m.decoder = Mlp::random({p, h, d}, {Activation::kTanh, Activation::kIdentity}, rng);
  return m;
}

VaeModel VaeModel::create_linear(Eigen::Index d, Eigen::Index h, Eigen::Index p, Rng& rng) {
  VaeModel m;
  m.encoder_trunk = Mlp::random({d, h}, {Activation::kIdentity}, rng);
  m.head_mean = Mlp::random({h, p}, {Activation::kIdentity}, rng);
  m.head_logvar = Mlp::random({h, p}, {Activation::kIdentity}, rng);
  m.decoder = Mlp::random({p, d}, {Activation::kIdentity}, rng);
  return m;
}

VaeModel VaeModel::zeros(Eigen::Index d, Eigen::Index h, Eigen::Index p) {
  VaeModel m;
  m.encoder_trunk = Mlp::zeros({d, h}, {Activation::kTanh});
  m.head_mean = Mlp::zeros({h, p}, {Activation::kIdentity});
  m.head_logvar = Mlp::zeros({h, p}, {Activation::kIdentity});
  m.decoder = Mlp::zeros({p, h, d}, {Activation::kTanh, Activation::kIdentity});
  return m;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("TrainConfig: epochs must be at least 1");
  if (batch_size < 1) throw InvalidArgument("TrainConfig: batch size must be at least 1");
  if (mc_samples < 1) throw InvalidArgument("TrainConfig: mc_samples must be at least 1");
  for (double lr : {lr_encoder, lr_decoder, joint_lr})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("TrainConfig: learning rates must be >= 0");
}

GaussianDiag<double> encode(const VaeModel& m, const VectorXd& x) {
  m.validate();
  check_dim("encode", m.d(), x.size());
  const Tensor h = ad::evaluate(m.encoder_trunk, as_row(x));
  const Tensor mean = ad::evaluate(m.head_mean, h);
  const Tensor logvar = ad::evaluate(m.head_logvar, h);
  const Tensor var = logvar.array().exp().matrix();
  check_finite_or_throw(var, "encode");
  return GaussianDiag<double>(mean.row(0).transpose(), var.row(0).transpose());
}

ReparamSample reparam_sample(const GaussianDiag<double>& q, Eigen::Index l, Rng& rng) {
  if (l < 1) throw InvalidArgument("reparam_sample: sample count must be at least 1");
  ReparamSample s;
  s.eps = rng.normal_matrix(l, q.dim());
  s.z = s.eps * q.var().cwiseSqrt().asDiagonal();
  s.z.rowwise() += q.mean().transpose();
  return s;
}

VectorXd decode(const VaeModel& m, const VectorXd& z) {
  m.validate();
  check_dim("decode", m.p(), z.size());
  const Tensor out = ad::evaluate(m.decoder, as_row(z));
  check_finite_or_throw(out, "decode");
  return out.row(0).transpose();
}

double decoder_log_likelihood(const VectorXd& x, const VectorXd& x_hat) {
  check_dim("decoder_log_likelihood", x.size(), x_hat.size());
  return -0.5 * (x - x_hat).squaredNorm() - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

VaeVars place(const VaeModel& m, Tape& tape, bool encoder_grad, bool decoder_grad) {
  return {ad::place(m.encoder_trunk, tape, encoder_grad), ad::place(m.head_mean, tape, encoder_grad),
          ad::place(m.head_logvar, tape, encoder_grad), ad::place(m.decoder, tape, decoder_grad)};
}

ElboGraph build_elbo_graph(Tape& tape, const VaeModel& m, const VaeVars& vars, const Tensor& x_rows,
                           const Tensor& eps, const Tensor* eps_kl, ElboType type, double row_weight) {
  const Eigen::Index n = x_rows.rows();
  const Eigen::Index d = m.d();
  const Eigen::Index p = m.p();
  check_dim("elbo graph x width", d, x_rows.cols());
  check_dim("elbo graph eps rows", n, eps.rows());
  check_dim("elbo graph eps width", p, eps.cols());

  const Var x = tape.constant(x_rows);
  const Var h = ad::apply(m.encoder_trunk, tape, vars.trunk.weights, vars.trunk.biases, x);
  const Var mu = ad::apply(m.head_mean, tape, vars.mean.weights, vars.mean.biases, h);
  const Var logvar = ad::apply(m.head_logvar, tape, vars.logvar.weights, vars.logvar.biases, h);
  const Var sigma = tape.exp(tape.scale(logvar, 0.5));
  const Var z = tape.add(mu, tape.hadamard(sigma, tape.constant(eps)));
  const Var x_hat = ad::apply(m.decoder, tape, vars.decoder.weights, vars.decoder.biases, z);

  // log N(x | x_hat, I) per row.
  const Var recon = tape.add(tape.scale(tape.sum_rows(tape.square(tape.sub(x, x_hat))), -0.5),
                             tape.constant(Tensor::Constant(n, 1, -0.5 * static_cast<double>(d) * kLog2Pi)));

  Var kl{};
  if (type == ElboType::kType2Analytic) {
    // 1/2 sum_k (-log var_k - 1 + var_k + mu_k^2)
    const Var inner = tape.add(tape.add(tape.scale(logvar, -1.0), tape.exp(logvar)), tape.square(mu));
    kl = tape.add(tape.scale(tape.sum_rows(inner), 0.5),
                  tape.constant(Tensor::Constant(n, 1, -0.5 * static_cast<double>(p))));
  } else {
    Var zk = z;
    if (type == ElboType::kType2Mc) {
      if (eps_kl == nullptr) throw InvalidArgument("elbo graph: type2-mc needs separate KL draws");
      check_dim("elbo graph eps_kl rows", n, eps_kl->rows());
      check_dim("elbo graph eps_kl width", p, eps_kl->cols());
      zk = tape.add(mu, tape.hadamard(sigma, tape.constant(*eps_kl)));
    }
    // log q(zk) - log N(zk | 0, I); the (p/2) log 2 pi terms cancel.
    const Var mahal = tape.hadamard(tape.square(tape.sub(zk, mu)), tape.exp(tape.scale(logvar, -1.0)));
    const Var log_q = tape.scale(tape.sum_rows(tape.add(logvar, mahal)), -0.5);
    const Var log_prior = tape.scale(tape.sum_rows(tape.square(zk)), -0.5);
    kl = tape.sub(log_q, log_prior);
  }

  const Var value = tape.add(recon, tape.scale(kl, -m.kl_weight));
  return {recon, kl, tape.scale(tape.sum(value), row_weight)};
}

ElboEstimate elbo_type1(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng) {
  return estimate_single(m, x, l, rng, ElboType::kType1);
}

ElboEstimate elbo_type2_mc(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng) {
  return estimate_single(m, x, l, rng, ElboType::kType2Mc);
}

ElboEstimate elbo_type2_analytic(const VaeModel& m, const VectorXd& x, Eigen::Index l, Rng& rng) {
  return estimate_single(m, x, l, rng, ElboType::kType2Analytic);
}

ElboEstimate elbo(const VaeModel& m, const VectorXd& x, ElboType type, Eigen::Index l, Rng& rng) {
  return estimate_single(m, x, l, rng, type);
}

ElboEstimate mean_elbo(const VaeModel& m, const MatrixXd& data, ElboType type, Eigen::Index l, Rng& rng) {
  m.validate();
  check_dim("mean_elbo data columns", m.d(), data.cols());
  if (data.rows() < 1) throw InvalidArgument("mean_elbo: empty dataset");
  if (l < 1) throw InvalidArgument("mean_elbo: sample count must be at least 1");
  constexpr Eigen::Index kMaxRows = 8192;
  const Eigen::Index per_chunk = std::max<Eigen::Index>(1, kMaxRows / l);
  const Eigen::Index n = data.rows();
  VectorXd point_value(n);
  double recon = 0.0;
  double kl = 0.0;
  for (Eigen::Index start = 0; start < n; start += per_chunk) {
    const Eigen::Index count = std::min(per_chunk, n - start);
    const Tensor x_rows = repeat_rows(data.middleRows(start, count), l);
    const Tensor eps = rng.normal_matrix(x_rows.rows(), m.p());
    Tensor eps_kl;
    if (type == ElboType::kType2Mc) eps_kl = rng.normal_matrix(x_rows.rows(), m.p());
    const RowTerms rows = evaluate_rows(m, x_rows, eps, type == ElboType::kType2Mc ? &eps_kl : nullptr, type);
    for (Eigen::Index i = 0; i < count; ++i) {
      const double r = rows.recon.segment(i * l, l).mean();
      const double k = rows.kl.segment(i * l, l).mean();
      point_value(start + i) = r - m.kl_weight * k;
      recon += r;
      kl += k;
    }
  }
  ElboEstimate est;
  est.n_samples = l;
  est.recon_term = recon / static_cast<double>(n);
  est.kl_term = kl / static_cast<double>(n);
  est.value = est.recon_term - m.kl_weight * est.kl_term;
  est.std_error = std::sqrt(sample_variance(point_value) / static_cast<double>(n));
  return est;
}

TrainResult train_em(const VaeModel& init, const MatrixXd& data, const TrainConfig& config) {
  return train(init, data, config, Schedule::kAlternating);
}

TrainResult train_backprop(const VaeModel& init, const MatrixXd& data, const TrainConfig& config) {
  return train(init, data, config, Schedule::kJoint);
}

VectorXd reconstruct(const VaeModel& m, const VectorXd& x, Rng& rng) {
  const auto q = encode(m, x);
  const auto s = reparam_sample(q, 1, rng);
  return decode(m, s.z.row(0).transpose());
}

MatrixXd generate(const VaeModel& m, Eigen::Index n, Rng& rng) {
  m.validate();
  if (n < 0) throw InvalidArgument("generate: n must be non-negative");
  if (n == 0) return MatrixXd(0, m.d());
  const Tensor z = rng.normal_matrix(n, m.p());
  const Tensor out = ad::evaluate(m.decoder, z);
  check_finite_or_throw(out, "generate");
  return out;
}

}  // namespace latentlab::vae
