#include "latentlab/factor_analysis.hpp"
#include "latentlab/io.hpp"
#include "latentlab/ppca.hpp"
#include "latentlab/vae.hpp"
#include "latentlab/verify.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace latentlab;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("LATENTLAB_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw InvalidArgument(std::string("LATENTLAB_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

void emit(const nlohmann::json& j) { std::cout << j.dump() << '\n'; }

MatrixXd load_values(const std::string& path) { return read_csv(path).values; }

Dataset as_dataset(MatrixXd values, const std::string& prefix) {
  Dataset out{std::move(values), {}};
  for (Eigen::Index j = 0; j < out.values.cols(); ++j) out.column_names.push_back(prefix + std::to_string(j));
  return out;
}

struct FitFaArgs {
  std::string data, out, trace;
  Eigen::Index latent_dim = 0;
  int max_iter = 500;
  double tol = 1e-7;
  std::optional<std::uint64_t> seed;
  bool center = false;
};

struct FitPpcaArgs {
  std::string data, out, method = "mle";
  Eigen::Index latent_dim = 0;
  std::optional<std::uint64_t> seed;
};

struct FitVaeArgs {
  std::string data, out, trace, elbo = "type2-analytic", train = "backprop";
  Eigen::Index latent_dim = 0, hidden = 0;
  int epochs = 200, batch = 32, mc_samples = 1;
  double lr = 1e-3, kl_weight = 1.0;
  std::optional<double> lr_enc, lr_dec;
  std::optional<std::uint64_t> seed;
};

struct ModelArgs {
  std::string model, data, out, suite = "all";
  Eigen::Index n = 0;
  std::optional<std::uint64_t> seed;
};

std::uint64_t resolve(const std::optional<std::uint64_t>& seed) { return seed ? *seed : default_seed(); }

int run_fit_fa(const FitFaArgs& a) {
  const MatrixXd data = load_values(a.data);
  const std::uint64_t seed = resolve(a.seed);
  const auto [model, trace] = fa::fit_em(data, a.latent_dim, {a.max_iter, a.tol, seed, a.center});
  json_io::save_model(model, a.out);
  write_fit_trace_csv(trace, a.trace);
  RunReport report{"fit-fa", seed, {}, a.trace};
  report.metrics["converged"] = trace.converged ? 1.0 : 0.0;
  report.metrics["iterations"] = trace.iterations_run;
  report.metrics["loglik_per_point"] = fa::log_likelihood(model, data) / static_cast<double>(data.rows());
  emit(report.to_json());
  return 0;
}

int run_fit_ppca(const FitPpcaArgs& a) {
  const MatrixXd data = load_values(a.data);
  const std::uint64_t seed = resolve(a.seed);
  RunReport report{"fit-ppca", seed, {}, std::nullopt};
  ppca::PpcaModel<double> model;
  if (a.method == "mle") {
    model = ppca::fit_mle(data, a.latent_dim);
    report.metrics["converged"] = 1.0;
  } else if (a.method == "em") {
    fa::FitConfig config;
    config.seed = seed;
    auto [fitted, trace] = ppca::fit_em(data, a.latent_dim, config);
    model = std::move(fitted);
    report.metrics["converged"] = trace.converged ? 1.0 : 0.0;
    report.metrics["iterations"] = trace.iterations_run;
  } else {
    throw InvalidArgument("--method must be mle or em");
  }
  json_io::save_model(model, a.out);
  report.metrics["sigma2"] = model.sigma2;
  report.metrics["rank_warning"] = model.rank_warning ? 1.0 : 0.0;
  report.metrics["loglik_per_point"] = ppca::log_likelihood(model, data) / static_cast<double>(data.rows());
  emit(report.to_json());
  return 0;
}

int run_fit_pca(const FitPpcaArgs& a) {
  const MatrixXd data = load_values(a.data);
  const auto model = ppca::pca_baseline(data, a.latent_dim);
  json_io::save_model(model, a.out);
  RunReport report{"fit-pca", resolve(a.seed), {}, std::nullopt};
  report.metrics["reconstruction_mse"] = ppca::reconstruction_error(model, data) / static_cast<double>(data.rows());
  emit(report.to_json());
  return 0;
}

int run_fit_vae(const FitVaeArgs& a) {
  const MatrixXd data = load_values(a.data);
  const std::uint64_t seed = resolve(a.seed);
  vae::TrainConfig config;
  config.epochs = a.epochs;
  config.batch_size = a.batch;
  config.mc_samples = a.mc_samples;
  config.joint_lr = a.lr;
  config.lr_encoder = a.lr_enc.value_or(a.lr);
  config.lr_decoder = a.lr_dec.value_or(a.lr);
  config.elbo_type = vae::parse_elbo_type(a.elbo);
  config.seed = seed;

  Rng init_rng(seed);
  auto init = vae::VaeModel::create(data.cols(), a.hidden, a.latent_dim, init_rng);
  init.kl_weight = a.kl_weight;

  vae::TrainResult result;
  if (a.train == "em") {
    result = vae::train_em(init, data, config);
  } else if (a.train == "backprop") {
    result = vae::train_backprop(init, data, config);
  } else {
    throw InvalidArgument("--train must be em or backprop");
  }
  json_io::save_model(result.model, a.out);
  write_vae_trace_csv(result.trace, a.trace);
  RunReport report{"fit-vae", seed, {}, a.trace};
  report.metrics["epochs"] = static_cast<double>(result.trace.size());
  if (!result.trace.empty()) {
    report.metrics["first_epoch_elbo"] = result.trace.front().elbo_mean;
    report.metrics["last_epoch_elbo"] = result.trace.back().elbo_mean;
  }
  emit(report.to_json());
  return 0;
}

int run_evaluate(const ModelArgs& a) {
  const auto model = json_io::load_model(a.model);
  const MatrixXd data = load_values(a.data);
  const double n = static_cast<double>(data.rows());
  nlohmann::json out;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, fa::FactorModel<double>>) {
          out["loglik_per_point"] = fa::log_likelihood(m, data) / n;
        } else if constexpr (std::is_same_v<M, ppca::PpcaModel<double>>) {
          out["loglik_per_point"] = ppca::log_likelihood(m, data) / n;
        } else if constexpr (std::is_same_v<M, ppca::PcaModel<double>>) {
          out["reconstruction_mse"] = ppca::reconstruction_error(m, data) / n;
        } else {
          Rng rng(resolve(a.seed));
          const auto est = vae::mean_elbo(m, data, vae::ElboType::kType2Analytic, 100, rng);
          out["elbo_per_point"] = est.value;
          out["elbo_std_error"] = est.std_error;
        }
      },
      model);
  emit(out);
  return 0;
}

int run_generate(const ModelArgs& a) {
  const auto model = json_io::load_model(a.model);
  const std::uint64_t seed = resolve(a.seed);
  Rng rng(seed);
  const MatrixXd samples = std::visit(
      [&](const auto& m) -> MatrixXd {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, fa::FactorModel<double>>) {
          return fa::sample_data(m, a.n, rng);
        } else if constexpr (std::is_same_v<M, ppca::PpcaModel<double>>) {
          return fa::sample_data(m.to_factor_model(), a.n, rng);
        } else if constexpr (std::is_same_v<M, ppca::PcaModel<double>>) {
          throw InvalidArgument("generate: a PCA model has no generative distribution");
        } else {
          return vae::generate(m, a.n, rng);
        }
      },
      model);
  write_csv(as_dataset(samples, "x"), a.out);
  RunReport report{"generate", seed, {}, std::nullopt};
  report.metrics["n"] = static_cast<double>(samples.rows());
  emit(report.to_json());
  return 0;
}

int run_transform(const ModelArgs& a) {
  const auto model = json_io::load_model(a.model);
  const MatrixXd data = load_values(a.data);
  const MatrixXd latents = std::visit(
      [&](const auto& m) -> MatrixXd {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, fa::FactorModel<double>>) {
          return fa::transform(m, data);
        } else if constexpr (std::is_same_v<M, ppca::PpcaModel<double>>) {
          return fa::transform(m.to_factor_model(), data);
        } else if constexpr (std::is_same_v<M, ppca::PcaModel<double>>) {
          return ppca::pca_transform(m, data);
        } else {
          MatrixXd z(data.rows(), m.p());
          for (Eigen::Index i = 0; i < data.rows(); ++i) z.row(i) = vae::encode(m, data.row(i).transpose()).mean();
          return z;
        }
      },
      model);
  write_csv(as_dataset(latents, "z"), a.out);
  RunReport report{"transform", resolve(a.seed), {}, std::nullopt};
  report.metrics["n"] = static_cast<double>(latents.rows());
  emit(report.to_json());
  return 0;
}

int run_verify(const ModelArgs& a) {
  const std::uint64_t seed = resolve(a.seed);
  const auto results = verify::run_suite(a.suite, seed);
  int failed = 0;
  for (const auto& r : results) {
    emit(r.to_json());
    if (!r.passed) ++failed;
  }
  emit({{"suite", a.suite},
        {"seed", seed},
        {"checks", results.size()},
        {"failed", failed}});
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latentlab: linear-Gaussian latent variable models and a small VAE"};
  app.require_subcommand(1);

  FitFaArgs fit_fa;
  auto* fa_cmd = app.add_subcommand("fit-fa", "Fit factor analysis by EM");
  fa_cmd->add_option("--data", fit_fa.data, "Training CSV")->required();
  fa_cmd->add_option("--latent-dim", fit_fa.latent_dim, "Latent dimension p")->required();
  fa_cmd->add_option("--max-iter", fit_fa.max_iter, "EM iteration cap")->capture_default_str();
  fa_cmd->add_option("--tol", fit_fa.tol, "Relative log-likelihood tolerance")->capture_default_str();
  fa_cmd->add_option("--seed", fit_fa.seed, "Seed for the loading initialisation");
  fa_cmd->add_flag("--center", fit_fa.center, "Center the data before EM");
  fa_cmd->add_option("--out", fit_fa.out, "Model JSON")->required();
  fa_cmd->add_option("--trace", fit_fa.trace, "Log-likelihood trace CSV")->required();

  FitPpcaArgs fit_ppca;
  auto* ppca_cmd = app.add_subcommand("fit-ppca", "Fit probabilistic PCA");
  ppca_cmd->add_option("--data", fit_ppca.data, "Training CSV")->required();
  ppca_cmd->add_option("--latent-dim", fit_ppca.latent_dim, "Latent dimension p")->required();
  ppca_cmd->add_option("--method", fit_ppca.method, "mle or em")
      ->check(CLI::IsMember({"mle", "em"}))
      ->capture_default_str();
  ppca_cmd->add_option("--seed", fit_ppca.seed, "Seed for EM initialisation");
  ppca_cmd->add_option("--out", fit_ppca.out, "Model JSON")->required();

  FitPpcaArgs fit_pca;
  auto* pca_cmd = app.add_subcommand("fit-pca", "Fit the PCA baseline");
  pca_cmd->add_option("--data", fit_pca.data, "Training CSV")->required();
  pca_cmd->add_option("--latent-dim", fit_pca.latent_dim, "Number of components")->required();
  pca_cmd->add_option("--out", fit_pca.out, "Model JSON")->required();

  FitVaeArgs fit_vae;
  auto* vae_cmd = app.add_subcommand("fit-vae", "Train a Gaussian VAE");
  vae_cmd->add_option("--data", fit_vae.data, "Training CSV")->required();
  vae_cmd->add_option("--latent-dim", fit_vae.latent_dim, "Latent dimension p")->required();
  vae_cmd->add_option("--hidden", fit_vae.hidden, "Hidden width")->required();
  vae_cmd->add_option("--elbo", fit_vae.elbo, "ELBO estimator")
      ->check(CLI::IsMember({"type1", "type2-mc", "type2-analytic"}))
      ->capture_default_str();
  vae_cmd->add_option("--train", fit_vae.train, "em or backprop")
      ->check(CLI::IsMember({"em", "backprop"}))
      ->capture_default_str();
  vae_cmd->add_option("--epochs", fit_vae.epochs)->capture_default_str();
  vae_cmd->add_option("--batch", fit_vae.batch)->capture_default_str();
  vae_cmd->add_option("--mc-samples", fit_vae.mc_samples)->capture_default_str();
  vae_cmd->add_option("--lr", fit_vae.lr, "Joint learning rate, and the default for --lr-enc/--lr-dec")
      ->capture_default_str();
  vae_cmd->add_option("--lr-enc", fit_vae.lr_enc, "Encoder learning rate for --train em");
  vae_cmd->add_option("--lr-dec", fit_vae.lr_dec, "Decoder learning rate for --train em");
  vae_cmd->add_option("--kl-weight", fit_vae.kl_weight)->capture_default_str();
  vae_cmd->add_option("--seed", fit_vae.seed);
  vae_cmd->add_option("--out", fit_vae.out, "Model JSON")->required();
  vae_cmd->add_option("--trace", fit_vae.trace, "Per-epoch ELBO trace CSV")->required();

  ModelArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Per-point log-likelihood or ELBO");
  eval_cmd->add_option("--model", eval_args.model)->required();
  eval_cmd->add_option("--data", eval_args.data)->required();
  eval_cmd->add_option("--seed", eval_args.seed, "Seed for VAE Monte Carlo");

  ModelArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "Sample from a fitted model");
  gen_cmd->add_option("--model", gen_args.model)->required();
  gen_cmd->add_option("--n", gen_args.n)->required()->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen_args.seed);
  gen_cmd->add_option("--out", gen_args.out)->required();

  ModelArgs transform_args;
  auto* transform_cmd = app.add_subcommand("transform", "Posterior latent means");
  transform_cmd->add_option("--model", transform_args.model)->required();
  transform_cmd->add_option("--data", transform_args.data)->required();
  transform_cmd->add_option("--out", transform_args.out)->required();

  ModelArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify", "Run the property suites");
  verify_cmd->add_option("--suite", verify_args.suite)
      ->check(CLI::IsMember({"gaussian", "fa", "ppca", "elbo", "autodiff", "vae", "all"}))
      ->capture_default_str();
  verify_cmd->add_option("--seed", verify_args.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fa_cmd) return run_fit_fa(fit_fa);
    if (*ppca_cmd) return run_fit_ppca(fit_ppca);
    if (*pca_cmd) return run_fit_pca(fit_pca);
    if (*vae_cmd) return run_fit_vae(fit_vae);
    if (*eval_cmd) return run_evaluate(eval_args);
    if (*gen_cmd) return run_generate(gen_args);
    if (*transform_cmd) return run_transform(transform_args);
    if (*verify_cmd) return run_verify(verify_args);
  } catch (const std::exception& e) {
    std::cerr << "latentlab: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
