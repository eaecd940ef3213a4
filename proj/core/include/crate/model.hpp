#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/blocks.hpp"

namespace crate {

enum class HeadKind { ClassToken, Pooling };

// Architecture description. A model is an encoder-only classifier when
// decoder_layers == 0 and an encoder-decoder autoencoder otherwise.
struct ModelSpec {
  std::size_t layers = 2;      // L, encoder depth
  std::size_t dim = 32;        // d
  std::size_t heads = 4;       // K
  std::size_t head_dim = 8;    // p
  std::size_t tokens = 16;     // N raw tokens per sample
  std::size_t patch_dim = 16;  // D raw token dimension
  std::size_t classes = 4;     // C
  std::size_t decoder_layers = 0;

  bool class_token = true;
  HeadKind head = HeadKind::ClassToken;
  bool patch_norms = true;  // LayerNorm before and after the patch projection
  bool patch_bias = true;
  bool head_norm = true;
  bool head_bias = true;
  bool out_bias = true;

  AttentionMode attention_mode = AttentionMode::Trainable;
  StepVariant step = StepVariant::Skip;
  bool softmax_scale = true;  // p^{-1/2} inside the softmax
  AttentionMask mask;

  double ln_eps = 1e-5;
  double eta = 0.1;
  double lambda = 0.1;
  double epsilon = 0.5;
  double kappa = 1.0;

  bool autoencoder() const { return decoder_layers > 0; }
  // n: tokens seen by the encoder (class token included).
  std::size_t sequence_length() const { return tokens + (class_token && !autoencoder() ? 1 : 0); }
  bool has_out_projection() const { return !(heads == 1 && head_dim == dim); }
  double softmax_temperature() const;
  RateParams rate() const;
  IstaParams ista() const { return {eta, lambda}; }
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

// Reference configurations: 224x224 RGB images cut into 16x16 patches
// (N = 196, D = 768), 1000 classes, head_dim 64.
ModelSpec crate_tiny();
ModelSpec crate_small();
ModelSpec crate_base();
ModelSpec crate_large();

enum class InitKind {
  LinearUniform,   // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  KaimingUniform,  // U(-sqrt(6/fan_in), sqrt(6/fan_in))
  Normal002,       // N(0, 0.02^2)
  Ones,
  Zeros,
};

struct TensorShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  InitKind init = InitKind::Zeros;

  std::size_t size() const { return rows * cols; }
};

// Trainable tensors in canonical order.
std::vector<TensorShape> parameter_shapes(const ModelSpec& spec);
std::size_t parameter_count(const ModelSpec& spec);

struct Tensor {
  std::string name;
  Matrix value;
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::vector<Tensor> tensors);

  static Model initialize(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  std::vector<Matrix> values() const;
  const Matrix& param(const std::string& name) const;
  Matrix& param(const std::string& name);
  std::size_t parameter_count() const;

 private:
  ModelSpec spec_;
  std::vector<Tensor> tensors_;
};

template <class T>
struct ModelParams {
  EmbeddingParams<T> emb;
  std::vector<EncoderLayerParams<T>> encoder;
  std::optional<HeadParams<T>> head;
  std::vector<DecoderLayerParams<T>> decoder;
  std::optional<T> mask_token;  // D x 1
  std::optional<T> w_post;      // D x d
};

// Structured view over a flat tensor list in parameter_shapes() order.
template <class T>
ModelParams<T> bind(const ModelSpec& spec, std::span<const T> tensors);

ModelParams<Matrix> bind(const Model& model);

// Raw tokens X (D x N) to final encoder features; optionally records the
// per-layer compression/ISTA outputs.
template <class T>
T encode(const ModelSpec& spec, const ModelParams<T>& params, const T& x, std::vector<EncoderTrace<T>>* trace = nullptr);

// C x 1 logits.
template <class T>
T classify(const ModelSpec& spec, const ModelParams<T>& params, const T& x, std::vector<EncoderTrace<T>>* trace = nullptr);

// Decoder and post-processing applied to encoder features; returns D x N.
template <class T>
T decode(const ModelSpec& spec, const ModelParams<T>& params, const T& z);

}  // namespace crate
