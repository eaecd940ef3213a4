#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crate/checkpoint.hpp"
#include "crate/dataset.hpp"
#include "crate/diagnostics.hpp"
#include "crate/error.hpp"
#include "crate/gmm.hpp"
#include "crate/rng.hpp"
#include "crate/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitGate = 4;

constexpr double kResidualGate = 0.9;

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw crate::InvalidArgument("cannot write " + out);
  f << text;
  if (!f) throw crate::InvalidArgument("failed writing " + out);
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw crate::InvalidArgument("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw crate::InvalidArgument(path + ": " + e.what());
  }
}

crate::TrainConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  nlohmann::json j = read_json(path);
  if (seed) j["seed"] = *seed;
  return crate::train_config_from_json(j);
}

crate::Dataset load_data(const std::string& path, const crate::TrainConfig& config) {
  return path.empty() ? crate::synthetic_training_data(config) : crate::read_crtd(path);
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw crate::InvalidArgument("bad number in list: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw crate::InvalidArgument("empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crate: train and inspect white-box transformer models"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, data_path, out_path, metrics_path;
  std::optional<std::uint64_t> seed;
  std::size_t layer = 0, head = 0, sample = 0, samples = crate::kDefaultMetricSamples;

  auto* train = app.add_subcommand("train", "Train a model from a config file and write a checkpoint");
  train->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data_path, "CRTD dataset; synthetic data from the config when omitted");
  train->add_option("--out", out_path, "Checkpoint manifest path")->required();
  train->add_option("--metrics", metrics_path, "Write per-step and per-epoch losses (JSON)");
  train->add_option("--seed", seed, "Override the config seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "CRTD dataset; synthetic data from the config when omitted");
  eval->add_option("--out", out_path, "Output JSON (stdout when omitted)");
  eval->add_option("--seed", seed, "Seed for data generation and mask sampling");

  auto* metrics = app.add_subcommand("layer-metrics", "Per-layer compression and sparsity (CSV)");
  metrics->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  metrics->add_option("--data", data_path, "CRTD dataset")->required()->check(CLI::ExistingFile);
  metrics->add_option("--samples", samples, "Samples to average over (clamped to the dataset size)");
  metrics->add_option("--out", out_path, "Output CSV (stdout when omitted)");

  auto* attn = app.add_subcommand("attn", "Class-token attention map of one head (JSON)");
  attn->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  attn->add_option("--data", data_path, "CRTD dataset")->required()->check(CLI::ExistingFile);
  attn->add_option("--sample", sample, "Sample index in the dataset");
  attn->add_option("--layer", layer, "Encoder layer (0-based)");
  attn->add_option("--head", head, "Attention head (0-based)");
  attn->add_option("--out", out_path, "Output JSON (stdout when omitted)");

  auto* coh = app.add_subcommand("coherence", "Coherence matrix of one layer's subspace bases (JSON)");
  coh->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  coh->add_option("--layer", layer, "Encoder layer (0-based)");
  coh->add_option("--out", out_path, "Output JSON (stdout when omitted)");

  crate::ExperimentConfig gmm;
  std::string sigma_list = "0.01", update = "gradient", noise = "normalized";
  std::optional<double> epsilon;
  auto* verify = app.add_subcommand("gmm-verify", "Compression-versus-denoising Monte Carlo experiment (JSON)");
  verify->add_option("--d", gmm.d, "Ambient dimension");
  verify->add_option("--n", gmm.n, "Tokens per trial");
  verify->add_option("--p", gmm.p, "Subspace dimension");
  verify->add_option("--K", gmm.K, "Number of subspaces");
  verify->add_option("--sigma", sigma_list, "Noise level, or a comma-separated list");
  verify->add_option("--trials", gmm.trials, "Trials per noise level");
  verify->add_option("--seed", gmm.seed, "Seed");
  verify->add_option("--epsilon", epsilon, "Quantization precision (default: bound-optimizing choice)");
  verify->add_option("--update", update, "Compression update")->check(CLI::IsMember({"gradient", "convex_mssa"}));
  verify->add_option("--noise", noise, "Noise convention")->check(CLI::IsMember({"normalized", "per_coordinate"}));
  verify->add_option("--out", out_path, "Output JSON (stdout when omitted)");

  std::uint64_t gradcheck_seed = 0;
  auto* grad = app.add_subcommand("gradcheck", "Run the registered gradient identity checks");
  grad->add_option("--seed", gradcheck_seed, "Seed for the random instances");
  grad->add_option("--out", out_path, "Output JSON (stdout when omitted)");

  crate::SyntheticGmmConfig synth_cfg;
  bool unlabeled = false;
  auto* synth = app.add_subcommand("synth", "Write a synthetic union-of-subspaces dataset (CRTD)");
  synth->add_option("--out", out_path, "Output CRTD path")->required();
  synth->add_option("--samples", synth_cfg.samples, "Number of samples");
  synth->add_option("--tokens", synth_cfg.tokens, "Tokens per sample");
  synth->add_option("--patch-dim", synth_cfg.patch_dim, "Token dimension");
  synth->add_option("--classes", synth_cfg.classes, "Number of classes");
  synth->add_option("--subspaces-per-class", synth_cfg.subspaces_per_class, "Subspaces owned by each class");
  synth->add_option("--subspace-dim", synth_cfg.subspace_dim, "Subspace dimension");
  synth->add_option("--sigma", synth_cfg.sigma, "Noise level");
  synth->add_option("--seed", synth_cfg.seed, "Seed");
  synth->add_flag("--unlabeled", unlabeled, "Omit labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*train) {
      const crate::TrainConfig config = load_config(config_path, seed);
      const crate::Dataset data = load_data(data_path, config);
      crate::RngStream rng(config.seed, 0x7A11);
      const crate::TrainResult result = crate::train(config, data, rng);
      crate::save_checkpoint(out_path, result.model, config.seed);
      if (!metrics_path.empty())
        emit(metrics_path, dump({{"epoch_loss", result.epoch_loss}, {"step_loss", result.step_loss}}));
      std::cout << "steps " << result.step_loss.size() << ", final epoch loss "
                << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << "\n";
    } else if (*eval) {
      const crate::TrainConfig config = load_config(config_path, seed);
      const crate::Checkpoint ckpt = crate::load_checkpoint(checkpoint_path);
      if (!(ckpt.model.spec() == config.model)) throw crate::InvalidArgument("checkpoint model does not match config");
      const crate::Dataset data = load_data(data_path, config);
      const crate::EvalResult r = crate::evaluate(ckpt.model, config, data, config.seed);
      nlohmann::json j = {{"samples", r.samples}, {"loss", r.loss}};
      if (r.accuracy) j["accuracy"] = *r.accuracy;
      emit(out_path, dump(j));
    } else if (*metrics) {
      const crate::Checkpoint ckpt = crate::load_checkpoint(checkpoint_path);
      const crate::Dataset data = crate::read_crtd(data_path);
      emit(out_path, crate::layer_metrics_csv(crate::layer_metrics(ckpt.model, data, samples)));
    } else if (*attn) {
      const crate::Checkpoint ckpt = crate::load_checkpoint(checkpoint_path);
      const crate::Dataset data = crate::read_crtd(data_path);
      if (sample >= data.size()) throw crate::InvalidArgument("sample index out of range");
      emit(out_path, dump(crate::to_json(crate::attention_map(ckpt.model, data.samples[sample], layer, head))));
    } else if (*coh) {
      const crate::Checkpoint ckpt = crate::load_checkpoint(checkpoint_path);
      emit(out_path, dump(crate::to_json(crate::coherence(ckpt.model, layer))));
    } else if (*verify) {
      gmm.sigmas = parse_list(sigma_list);
      gmm.epsilon = epsilon;
      gmm.update = update == "gradient" ? crate::CompressionUpdate::GradientStep : crate::CompressionUpdate::ConvexMssa;
      gmm.noise = noise == "normalized" ? crate::NoiseConvention::Normalized : crate::NoiseConvention::PerCoordinate;
      const crate::ExperimentReport report = crate::compression_denoising_experiment(gmm);
      emit(out_path, dump(crate::to_json(report)));
      for (const auto& r : report.results) {
        if (r.residual_decrease_fraction < kResidualGate) {
          std::cerr << "gmm-verify: residual decreased for " << r.residual_decrease_fraction << " of tokens at sigma "
                    << r.sigma << " (gate " << kResidualGate << ")\n";
          return kExitGate;
        }
      }
    } else if (*grad) {
      const auto results = crate::GradCheckRegistry::defaults().run_all(gradcheck_seed);
      for (const auto& r : results) {
        std::fprintf(stderr, "%-48s error %.3e  tolerance %.1e  %s\n", r.name.c_str(), r.error, r.tolerance,
                     r.passed ? "PASS" : "FAIL");
      }
      emit(out_path, dump(crate::to_json(results)));
      if (!crate::all_passed(results)) return kExitGate;
    } else if (*synth) {
      crate::Dataset d = crate::synthetic_gmm_dataset(synth_cfg);
      if (unlabeled) d.labels.clear();
      crate::write_crtd(out_path, d);
    }
  } catch (const crate::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const crate::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
