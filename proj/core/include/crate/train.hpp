#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/dataset.hpp"
#include "crate/losses.hpp"
#include "crate/model.hpp"
#include "crate/optim.hpp"

namespace crate {

class RngStream;

enum class TaskKind { Classify, MaskedAutoencode, GmmClassify };

struct TrainConfig {
  ModelSpec model;
  TaskKind task = TaskKind::GmmClassify;
  OptimizerConfig optimizer = AdamConfig{};
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double mask_ratio = 0.75;
  double label_smoothing = 0.0;
  MaeLossMode mae_loss = MaeLossMode::FullImage;
  SyntheticGmmConfig data;  // synthetic training set when no data file is given

  bool classification() const { return task != TaskKind::MaskedAutoencode; }
  void validate() const;
};

// Flat JSON mirroring TrainConfig (model fields at top level). Unknown keys
// are rejected.
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Synthetic data matching the config's model shape (tokens, patch_dim, classes).
Dataset synthetic_training_data(const TrainConfig& config);

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  std::vector<double> step_loss;   // mean sample loss per step
};

struct BatchLoss {
  double loss = 0.0;             // mean over the batch
  std::vector<Matrix> grads;     // d loss / d params, parameter_shapes() order
};

// Mean loss and gradient over the given samples; `omegas` holds one mask set
// per sample for the autoencoding task (ignored otherwise). Per-sample tapes
// run in parallel and are reduced in index order.
BatchLoss batch_loss_and_grad(const Model& model, const TrainConfig& config, const Dataset& data,
                              std::span<const std::size_t> indices, const std::vector<std::vector<std::size_t>>& omegas);

// Mask sets of size round(ratio * N), uniformly without replacement.
std::vector<std::size_t> sample_mask(std::size_t tokens, double ratio, RngStream& rng);

TrainResult train(const TrainConfig& config, const Dataset& data, RngStream& rng);
TrainResult train(const TrainConfig& config, const Dataset& data, Model initial, RngStream& rng);

struct EvalResult {
  std::size_t samples = 0;
  double loss = 0.0;
  std::optional<double> accuracy;
};

EvalResult evaluate(const Model& model, const TrainConfig& config, const Dataset& data, std::uint64_t seed);

}  // namespace crate
