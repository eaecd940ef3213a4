#include "crate/train.hpp"

#include <cmath>
#include <functional>
#include <map>

#include "crate/error.hpp"
#include "crate/parallel.hpp"
#include "crate/rng.hpp"

namespace crate {

void TrainConfig::validate() const {
  model.validate();
  if (classification() == model.autoencoder())
    throw InvalidArgument(classification() ? "train config: classification task needs decoder_layers == 0"
                                           : "train config: autoencoding task needs decoder_layers > 0");
  if (batch_size == 0) throw InvalidArgument("train config: batch_size must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw InvalidArgument("train config: mask_ratio must be in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw InvalidArgument("train config: label_smoothing must be in [0, 1)");
  std::visit([](const auto& o) {
    if (!(o.lr > 0.0)) throw InvalidArgument("train config: lr must be positive");
  }, optimizer);
}

namespace {

const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::Classify: return "classify";
    case TaskKind::MaskedAutoencode: return "masked_autoencode";
    case TaskKind::GmmClassify: return "gmm_classify";
  }
  return "";
}

template <class V>
V get(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidArgument("config: bad value for '" + key + "'");
  }
}

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["task"] = task_name(c.task);
  if (const auto* sgd = std::get_if<SgdConfig>(&c.optimizer)) {
    j["optimizer"] = "sgd";
    j["lr"] = sgd->lr;
    j["momentum"] = sgd->momentum;
    j["weight_decay"] = sgd->weight_decay;
  } else {
    const auto& adam = std::get<AdamConfig>(c.optimizer);
    j["optimizer"] = "adam";
    j["lr"] = adam.lr;
    j["beta1"] = adam.beta1;
    j["beta2"] = adam.beta2;
    j["adam_eps"] = adam.eps;
    j["weight_decay"] = adam.weight_decay;
  }
  j["epochs"] = c.epochs;
  j["max_steps"] = c.max_steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["mask_ratio"] = c.mask_ratio;
  j["label_smoothing"] = c.label_smoothing;
  j["mae_loss"] = c.mae_loss == MaeLossMode::FullImage ? "full" : "masked";
  j["data_samples"] = c.data.samples;
  j["data_subspaces_per_class"] = c.data.subspaces_per_class;
  j["data_subspace_dim"] = c.data.subspace_dim;
  j["data_sigma"] = c.data.sigma;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("config: top level must be an object");
  TrainConfig c;
  nlohmann::json model = to_json(c.model);
  std::string optimizer = "adam";
  double lr = -1.0, momentum = 0.0, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.0;
  bool seen_sgd_key = false, seen_adam_key = false;
  for (const auto& [key, v] : j.items()) {
    if (model.contains(key)) {
      model[key] = v;
    } else if (key == "task") {
      const auto s = get<std::string>(v, key);
      if (s == "classify") c.task = TaskKind::Classify;
      else if (s == "masked_autoencode") c.task = TaskKind::MaskedAutoencode;
      else if (s == "gmm_classify") c.task = TaskKind::GmmClassify;
      else throw InvalidArgument("config: unknown task '" + s + "'");
    } else if (key == "optimizer") {
      optimizer = get<std::string>(v, key);
      if (optimizer != "sgd" && optimizer != "adam") throw InvalidArgument("config: unknown optimizer '" + optimizer + "'");
    } else if (key == "lr") lr = get<double>(v, key);
    else if (key == "momentum") { momentum = get<double>(v, key); seen_sgd_key = true; }
    else if (key == "beta1") { beta1 = get<double>(v, key); seen_adam_key = true; }
    else if (key == "beta2") { beta2 = get<double>(v, key); seen_adam_key = true; }
    else if (key == "adam_eps") { adam_eps = get<double>(v, key); seen_adam_key = true; }
    else if (key == "weight_decay") weight_decay = get<double>(v, key);
    else if (key == "epochs") c.epochs = get<std::size_t>(v, key);
    else if (key == "max_steps") c.max_steps = get<std::size_t>(v, key);
    else if (key == "batch_size") c.batch_size = get<std::size_t>(v, key);
    else if (key == "seed") c.seed = get<std::uint64_t>(v, key);
    else if (key == "mask_ratio") c.mask_ratio = get<double>(v, key);
    else if (key == "label_smoothing") c.label_smoothing = get<double>(v, key);
    else if (key == "mae_loss") {
      const auto s = get<std::string>(v, key);
      if (s == "full") c.mae_loss = MaeLossMode::FullImage;
      else if (s == "masked") c.mae_loss = MaeLossMode::MaskedOnly;
      else throw InvalidArgument("config: mae_loss must be 'full' or 'masked'");
    } else if (key == "data_samples") c.data.samples = get<std::size_t>(v, key);
    else if (key == "data_subspaces_per_class") c.data.subspaces_per_class = get<std::size_t>(v, key);
    else if (key == "data_subspace_dim") c.data.subspace_dim = get<std::size_t>(v, key);
    else if (key == "data_sigma") c.data.sigma = get<double>(v, key);
    else throw InvalidArgument("config: unknown key '" + key + "'");
  }
  try {
    c.model = model_spec_from_json(model);
  } catch (const FormatError& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  if (optimizer == "sgd") {
    if (seen_adam_key) throw InvalidArgument("config: adam keys given with optimizer 'sgd'");
    c.optimizer = SgdConfig{lr > 0.0 ? lr : 0.01, momentum, weight_decay};
  } else {
    if (seen_sgd_key) throw InvalidArgument("config: momentum given with optimizer 'adam'");
    c.optimizer = AdamConfig{lr > 0.0 ? lr : 1e-3, beta1, beta2, adam_eps, weight_decay};
  }
  if (j.contains("lr") && !(lr > 0.0)) throw InvalidArgument("config: lr must be positive");
  c.validate();
  return c;
}

Dataset synthetic_training_data(const TrainConfig& config) {
  SyntheticGmmConfig d = config.data;
  d.tokens = config.model.tokens;
  d.patch_dim = config.model.patch_dim;
  d.classes = config.classification() ? config.model.classes : std::max<std::size_t>(config.model.classes, 1);
  d.seed = config.seed;
  Dataset out = synthetic_gmm_dataset(d);
  if (!config.classification()) out.labels.clear();
  return out;
}

std::vector<std::size_t> sample_mask(std::size_t tokens, double ratio, RngStream& rng) {
  const auto k = std::size_t(std::llround(ratio * double(tokens)));
  std::vector<std::size_t> omega = rng.sample_without_replacement(tokens, std::min(k, tokens));
  std::sort(omega.begin(), omega.end());
  return omega;
}

namespace {

void check_data(const TrainConfig& config, const Dataset& data) {
  data.validate();
  if (data.patch_dim != config.model.patch_dim || data.tokens != config.model.tokens)
    throw ShapeMismatch("dataset samples are " + std::to_string(data.patch_dim) + "x" + std::to_string(data.tokens) +
                        ", model expects " + std::to_string(config.model.patch_dim) + "x" +
                        std::to_string(config.model.tokens));
  if (config.classification()) {
    if (!data.labeled()) throw InvalidArgument("classification needs a labeled dataset");
    for (std::uint32_t l : data.labels)
      if (l >= config.model.classes) throw InvalidArgument("dataset label " + std::to_string(l) + " >= classes");
  }
}

}  // namespace

BatchLoss batch_loss_and_grad(const Model& model, const TrainConfig& config, const Dataset& data,
                              std::span<const std::size_t> indices, const std::vector<std::vector<std::size_t>>& omegas) {
  const std::size_t b = indices.size();
  if (b == 0) throw InvalidArgument("batch_loss_and_grad: empty batch");
  std::vector<double> losses(b);
  std::vector<std::vector<Matrix>> grads(b);
  const ModelSpec& spec = model.spec();
  parallel_for(b, [&](std::size_t s) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(model.tensors().size());
    for (const Tensor& t : model.tensors()) vars.push_back(tape.variable(t.value));
    const ModelParams<ad::Var> params = crate::bind<ad::Var>(spec, std::span<const ad::Var>(vars));
    const std::size_t i = indices[s];
    const ad::Var loss = config.classification()
                             ? classification_loss(spec, params, data.samples[i], data.labels[i], config.label_smoothing)
                             : mae_loss(spec, params, data.samples[i], omegas.at(s), config.mae_loss);
    tape.backward(loss);
    losses[s] = loss.value()[0];
    grads[s].reserve(vars.size());
    for (const ad::Var& v : vars) grads[s].push_back(tape.grad(v));
  });
  BatchLoss out;
  out.grads = std::move(grads[0]);
  out.loss = losses[0];
  for (std::size_t s = 1; s < b; ++s) {
    out.loss += losses[s];
    for (std::size_t p = 0; p < out.grads.size(); ++p) out.grads[p] += grads[s][p];
  }
  const double inv = 1.0 / double(b);
  out.loss *= inv;
  for (Matrix& g : out.grads) g *= inv;
  return out;
}

TrainResult train(const TrainConfig& config, const Dataset& data, RngStream& rng) {
  return train(config, data, Model::initialize(config.model, config.seed), rng);
}

TrainResult train(const TrainConfig& config, const Dataset& data, Model initial, RngStream& rng) {
  config.validate();
  if (!(initial.spec() == config.model)) throw InvalidArgument("train: initial model does not match config");
  check_data(config, data);
  TrainResult result{std::move(initial), {}, {}};
  if (config.epochs == 0 || data.size() == 0) return result;

  std::vector<Matrix> params = result.model.values();
  OptimizerState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = rng.permutation(data.size());
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) break;
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      std::vector<std::vector<std::size_t>> omegas;
      if (!config.classification())
        for (std::size_t s = 0; s < batch.size(); ++s) omegas.push_back(sample_mask(data.tokens, config.mask_ratio, rng));
      BatchLoss bl;
      try {
        bl = batch_loss_and_grad(result.model, config, data, batch, omegas);
      } catch (const DivergedLoss&) {
        throw;
      } catch (const NumericalError& e) {
        if (step == 0) throw;
        throw DivergedLoss("forward pass failed at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(bl.loss)) throw DivergedLoss("loss became non-finite at step " + std::to_string(step));
      for (const Matrix& g : bl.grads)
        if (!all_finite(g)) throw DivergedLoss("gradient became non-finite at step " + std::to_string(step));
      optimizer_step(params, bl.grads, state, config.optimizer);
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (!all_finite(params[p])) throw DivergedLoss("parameters became non-finite at step " + std::to_string(step));
        result.model.tensors()[p].value = params[p];
      }
      result.step_loss.push_back(bl.loss);
      epoch_total += bl.loss;
      ++epoch_steps;
      ++step;
    }
    if (epoch_steps == 0) break;
    result.epoch_loss.push_back(epoch_total / double(epoch_steps));
  }
  return result;
}

EvalResult evaluate(const Model& model, const TrainConfig& config, const Dataset& data, std::uint64_t seed) {
  check_data(config, data);
  EvalResult r;
  r.samples = data.size();
  if (data.size() == 0) return r;
  const ModelParams<Matrix> params = bind(model);
  const ModelSpec& spec = model.spec();
  std::vector<double> losses(data.size());
  std::vector<int> correct(data.size(), 0);
  std::vector<std::vector<std::size_t>> omegas(data.size());
  if (!config.classification()) {
    RngStream rng(seed, 0xE7A1);
    for (auto& o : omegas) o = sample_mask(data.tokens, config.mask_ratio, rng);
  }
  parallel_for(data.size(), [&](std::size_t i) {
    if (config.classification()) {
      const Matrix logits = classify(spec, params, data.samples[i]);
      losses[i] = cross_entropy(smoothed_target(data.labels[i], spec.classes, config.label_smoothing), logits);
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
      correct[i] = best == data.labels[i] ? 1 : 0;
    } else {
      losses[i] = mae_loss(spec, params, data.samples[i], omegas[i], config.mae_loss);
    }
  });
  double total = 0.0, hits = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += losses[i];
    hits += correct[i];
  }
  r.loss = total / double(data.size());
  if (config.classification()) r.accuracy = hits / double(data.size());
  if (!std::isfinite(r.loss)) throw DivergedLoss("evaluation loss is non-finite");
  return r;
}

}  // namespace crate
