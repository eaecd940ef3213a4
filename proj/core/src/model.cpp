#include "crate/model.hpp"

#include <cmath>
#include <map>

#include "crate/error.hpp"
#include "crate/rng.hpp"

namespace crate {

double ModelSpec::softmax_temperature() const { return softmax_scale ? 1.0 / std::sqrt(double(head_dim)) : 1.0; }

RateParams ModelSpec::rate() const {
  RateParams r;
  r.epsilon = epsilon;
  r.lambda = lambda;
  r.kappa = kappa;
  r.eta = eta;
  return r;
}

void ModelSpec::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw InvalidArgument(std::string("model spec: ") + what + " must be positive");
  };
  positive(dim, "dim");
  positive(heads, "heads");
  positive(head_dim, "head_dim");
  positive(tokens, "tokens");
  positive(patch_dim, "patch_dim");
  if (!autoencoder()) positive(classes, "classes");
  if (autoencoder() && class_token) throw InvalidArgument("model spec: autoencoders do not use a class token");
  if (!autoencoder() && head == HeadKind::ClassToken && !class_token)
    throw InvalidArgument("model spec: class-token head requires class_token");
  if (!(ln_eps > 0.0)) throw InvalidArgument("model spec: ln_eps must be positive");
  rate().validate();
}

namespace {

const char* to_string(HeadKind h) { return h == HeadKind::ClassToken ? "class_token" : "pooling"; }
const char* to_string(AttentionMode m) { return m == AttentionMode::ExactBasis ? "exact_basis" : "trainable"; }
const char* to_string(StepVariant s) { return s == StepVariant::Skip ? "skip" : "convex"; }
const char* to_string(MaskKind m) { return m == MaskKind::None ? "none" : "causal"; }
const char* to_string(CausalConvention c) { return c == CausalConvention::Literal ? "literal" : "transposed"; }

template <class E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
  const std::string s = j.at(key).get<std::string>();
  for (const auto& [name, value] : options)
    if (s == name) return value;
  throw InvalidArgument(std::string("model spec: bad value '") + s + "' for " + key);
}

}  // namespace

nlohmann::json to_json(const ModelSpec& s) {
  return nlohmann::json{
      {"layers", s.layers},
      {"dim", s.dim},
      {"heads", s.heads},
      {"head_dim", s.head_dim},
      {"tokens", s.tokens},
      {"patch_dim", s.patch_dim},
      {"classes", s.classes},
      {"decoder_layers", s.decoder_layers},
      {"class_token", s.class_token},
      {"head", to_string(s.head)},
      {"patch_norms", s.patch_norms},
      {"patch_bias", s.patch_bias},
      {"head_norm", s.head_norm},
      {"head_bias", s.head_bias},
      {"out_bias", s.out_bias},
      {"attention_mode", to_string(s.attention_mode)},
      {"step", to_string(s.step)},
      {"softmax_scale", s.softmax_scale},
      {"mask", to_string(s.mask.kind)},
      {"causal_convention", to_string(s.mask.convention)},
      {"ln_eps", s.ln_eps},
      {"eta", s.eta},
      {"lambda", s.lambda},
      {"epsilon", s.epsilon},
      {"kappa", s.kappa},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.layers = j.at("layers").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
    s.heads = j.at("heads").get<std::size_t>();
    s.head_dim = j.at("head_dim").get<std::size_t>();
    s.tokens = j.at("tokens").get<std::size_t>();
    s.patch_dim = j.at("patch_dim").get<std::size_t>();
    s.classes = j.at("classes").get<std::size_t>();
    s.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    s.class_token = j.at("class_token").get<bool>();
    s.head = parse_enum<HeadKind>(j, "head", {{"class_token", HeadKind::ClassToken}, {"pooling", HeadKind::Pooling}});
    s.patch_norms = j.at("patch_norms").get<bool>();
    s.patch_bias = j.at("patch_bias").get<bool>();
    s.head_norm = j.at("head_norm").get<bool>();
    s.head_bias = j.at("head_bias").get<bool>();
    s.out_bias = j.at("out_bias").get<bool>();
    s.attention_mode = parse_enum<AttentionMode>(
        j, "attention_mode", {{"exact_basis", AttentionMode::ExactBasis}, {"trainable", AttentionMode::Trainable}});
    s.step = parse_enum<StepVariant>(j, "step", {{"skip", StepVariant::Skip}, {"convex", StepVariant::Convex}});
    s.softmax_scale = j.at("softmax_scale").get<bool>();
    s.mask.kind = parse_enum<MaskKind>(j, "mask", {{"none", MaskKind::None}, {"causal", MaskKind::Causal}});
    s.mask.convention = parse_enum<CausalConvention>(
        j, "causal_convention", {{"literal", CausalConvention::Literal}, {"transposed", CausalConvention::Transposed}});
    s.ln_eps = j.at("ln_eps").get<double>();
    s.eta = j.at("eta").get<double>();
    s.lambda = j.at("lambda").get<double>();
    s.epsilon = j.at("epsilon").get<double>();
    s.kappa = j.at("kappa").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

ModelSpec imagenet_config(std::size_t layers, std::size_t dim, std::size_t heads) {
  ModelSpec s;
  s.layers = layers;
  s.dim = dim;
  s.heads = heads;
  s.head_dim = 64;
  s.tokens = (224 / 16) * (224 / 16);
  s.patch_dim = 16 * 16 * 3;
  s.classes = 1000;
  return s;
}

}  // namespace

ModelSpec crate_tiny() { return imagenet_config(12, 384, 6); }
ModelSpec crate_small() { return imagenet_config(12, 576, 12); }
ModelSpec crate_base() { return imagenet_config(12, 768, 12); }
ModelSpec crate_large() { return imagenet_config(24, 1024, 16); }

namespace {

void push_norm(std::vector<TensorShape>& out, const std::string& prefix, std::size_t dim) {
  out.push_back({prefix + ".gain", dim, 1, InitKind::Ones});
  out.push_back({prefix + ".bias", dim, 1, InitKind::Zeros});
}

void push_attention(std::vector<TensorShape>& out, const ModelSpec& s, const std::string& prefix) {
  const std::size_t inner = s.heads * s.head_dim;
  out.push_back({prefix + ".qkv", inner, s.dim, InitKind::LinearUniform});
  if (s.attention_mode == AttentionMode::Trainable && s.has_out_projection()) {
    out.push_back({prefix + ".out.weight", s.dim, inner, InitKind::LinearUniform});
    if (s.out_bias) out.push_back({prefix + ".out.bias", s.dim, 1, InitKind::Zeros});
  }
}

}  // namespace

std::vector<TensorShape> parameter_shapes(const ModelSpec& s) {
  s.validate();
  std::vector<TensorShape> out;
  if (s.patch_norms) push_norm(out, "embed.norm_in", s.patch_dim);
  out.push_back({"embed.proj.weight", s.dim, s.patch_dim, InitKind::LinearUniform});
  if (s.patch_bias) out.push_back({"embed.proj.bias", s.dim, 1, InitKind::Zeros});
  if (s.patch_norms) push_norm(out, "embed.norm_out", s.dim);
  out.push_back({"embed.pos", s.dim, s.sequence_length(), InitKind::Normal002});
  if (s.class_token && !s.autoencoder()) out.push_back({"embed.cls", s.dim, 1, InitKind::Normal002});
  if (s.autoencoder()) out.push_back({"embed.mask_token", s.patch_dim, 1, InitKind::Normal002});

  for (std::size_t l = 0; l < s.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    push_norm(out, p + ".norm1", s.dim);
    push_attention(out, s, p + ".attn");
    push_norm(out, p + ".norm2", s.dim);
    out.push_back({p + ".ista.dict", s.dim, s.dim, InitKind::KaimingUniform});
  }

  if (!s.autoencoder()) {
    if (s.head_norm) push_norm(out, "head.norm", s.dim);
    out.push_back({"head.weight", s.classes, s.dim, InitKind::LinearUniform});
    if (s.head_bias) out.push_back({"head.bias", s.classes, 1, InitKind::Zeros});
    return out;
  }

  for (std::size_t l = 0; l < s.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    push_norm(out, p + ".norm1", s.dim);
    out.push_back({p + ".synth", s.dim, s.dim, InitKind::LinearUniform});
    push_norm(out, p + ".norm2", s.dim);
    push_attention(out, s, p + ".attn");
  }
  out.push_back({"post.weight", s.patch_dim, s.dim, InitKind::LinearUniform});
  return out;
}

std::size_t parameter_count(const ModelSpec& spec) {
  std::size_t total = 0;
  for (const TensorShape& t : parameter_shapes(spec)) total += t.size();
  return total;
}

Model::Model(ModelSpec spec, std::vector<Tensor> tensors) : spec_(std::move(spec)), tensors_(std::move(tensors)) {
  const auto shapes = parameter_shapes(spec_);
  if (shapes.size() != tensors_.size())
    throw ShapeMismatch("model: expected " + std::to_string(shapes.size()) + " tensors, got " +
                        std::to_string(tensors_.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Tensor& t = tensors_[i];
    if (t.name != shapes[i].name || t.value.rows() != shapes[i].rows || t.value.cols() != shapes[i].cols)
      throw ShapeMismatch("model: tensor " + std::to_string(i) + " is '" + t.name + "' " + t.value.shape_string() +
                          ", expected '" + shapes[i].name + "' " + std::to_string(shapes[i].rows) + "x" +
                          std::to_string(shapes[i].cols));
  }
}

Model Model::initialize(const ModelSpec& spec, std::uint64_t seed) {
  const auto shapes = parameter_shapes(spec);
  std::vector<Tensor> tensors;
  tensors.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const TensorShape& s = shapes[i];
    RngStream rng(seed, 0x1000 + i);
    Matrix m(s.rows, s.cols);
    const double fan_in = double(s.cols);
    switch (s.init) {
      case InitKind::LinearUniform: {
        const double b = 1.0 / std::sqrt(fan_in);
        for (double& x : m.values()) x = rng.uniform(-b, b);
        break;
      }
      case InitKind::KaimingUniform: {
        const double b = std::sqrt(6.0 / fan_in);
        for (double& x : m.values()) x = rng.uniform(-b, b);
        break;
      }
      case InitKind::Normal002:
        for (double& x : m.values()) x = 0.02 * rng.normal();
        break;
      case InitKind::Ones:
        m = Matrix(s.rows, s.cols, 1.0);
        break;
      case InitKind::Zeros:
        break;
    }
    tensors.push_back({s.name, std::move(m)});
  }
  return Model(spec, std::move(tensors));
}

std::vector<Matrix> Model::values() const {
  std::vector<Matrix> v;
  v.reserve(tensors_.size());
  for (const Tensor& t : tensors_) v.push_back(t.value);
  return v;
}

const Matrix& Model::param(const std::string& name) const {
  for (const Tensor& t : tensors_)
    if (t.name == name) return t.value;
  throw InvalidArgument("model: no tensor named '" + name + "'");
}

Matrix& Model::param(const std::string& name) {
  return const_cast<Matrix&>(static_cast<const Model&>(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.value.size();
  return n;
}

template <class T>
ModelParams<T> bind(const ModelSpec& spec, std::span<const T> tensors) {
  const auto shapes = parameter_shapes(spec);
  if (shapes.size() != tensors.size()) throw ShapeMismatch("bind: tensor count mismatch");
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t i = 0; i < shapes.size(); ++i) index.emplace(shapes[i].name, i);
  auto has = [&](const std::string& name) { return index.count(name) > 0; };
  auto get = [&](const std::string& name) -> const T& { return tensors[index.at(name)]; };
  auto norm = [&](const std::string& prefix) { return LayerNormParams<T>{get(prefix + ".gain"), get(prefix + ".bias"), spec.ln_eps}; };
  auto attention = [&](const std::string& prefix) {
    AttentionParams<T> a;
    a.mode = spec.attention_mode;
    a.qkv = get(prefix + ".qkv");
    if (has(prefix + ".out.weight")) a.out = get(prefix + ".out.weight");
    if (has(prefix + ".out.bias")) a.out_bias = get(prefix + ".out.bias");
    a.heads = spec.heads;
    a.head_dim = spec.head_dim;
    a.scale = spec.softmax_temperature();
    a.beta = spec.rate().beta(spec.head_dim, spec.sequence_length());
    return a;
  };

  ModelParams<T> p;
  if (spec.patch_norms) {
    p.emb.norm_in = norm("embed.norm_in");
    p.emb.norm_out = norm("embed.norm_out");
  }
  p.emb.w_pre = get("embed.proj.weight");
  if (spec.patch_bias) p.emb.b_pre = get("embed.proj.bias");
  p.emb.pos = get("embed.pos");
  if (has("embed.cls")) p.emb.cls = get("embed.cls");
  if (has("embed.mask_token")) p.mask_token = get("embed.mask_token");

  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l);
    p.encoder.push_back({attention(pre + ".attn"), get(pre + ".ista.dict"), norm(pre + ".norm1"), norm(pre + ".norm2")});
  }
  if (!spec.autoencoder()) {
    HeadParams<T> h;
    if (spec.head_norm) h.norm = norm("head.norm");
    h.weight = get("head.weight");
    if (spec.head_bias) h.bias = get("head.bias");
    p.head = h;
  } else {
    for (std::size_t l = 0; l < spec.decoder_layers; ++l) {
      const std::string pre = "decoder." + std::to_string(l);
      p.decoder.push_back({attention(pre + ".attn"), get(pre + ".synth"), norm(pre + ".norm1"), norm(pre + ".norm2")});
    }
    p.w_post = get("post.weight");
  }
  return p;
}

ModelParams<Matrix> bind(const Model& model) {
  const std::vector<Matrix> v = model.values();
  return bind<Matrix>(model.spec(), std::span<const Matrix>(v));
}

template <class T>
T encode(const ModelSpec& spec, const ModelParams<T>& params, const T& x, std::vector<EncoderTrace<T>>* trace) {
  T z = preprocess(x, params.emb);
  const RateParams rate = spec.rate();
  for (const auto& layer : params.encoder) {
    EncoderTrace<T> t;
    if (spec.step == StepVariant::Skip) {
      t = encoder_layer(z, layer, spec.ista(), spec.mask);
    } else {
      const T normed = apply_layer_norm(z, layer.ln1);
      t.half = compression_step(normed, layer.attn, rate, StepVariant::Convex, spec.mask);
      t.out = ista_step(apply_layer_norm(t.half, layer.ln2), layer.dict, spec.ista());
    }
    z = t.out;
    if (trace) trace->push_back(std::move(t));
  }
  return z;
}

template <class T>
T classify(const ModelSpec& spec, const ModelParams<T>& params, const T& x, std::vector<EncoderTrace<T>>* trace) {
  if (!params.head) throw InvalidArgument("classify: model has no classification head");
  const T z = encode(spec, params, x, trace);
  return spec.head == HeadKind::ClassToken ? classifier_head(z, *params.head) : pooling_head(z, *params.head);
}

template <class T>
T decode(const ModelSpec& spec, const ModelParams<T>& params, const T& z) {
  if (!params.w_post) throw InvalidArgument("decode: model has no decoder");
  T h = z;
  for (const auto& layer : params.decoder) h = decoder_layer(h, layer, spec.mask);
  return postprocess(h, params.emb.pos, *params.w_post);
}

#define CRATE_INSTANTIATE_MODEL(T)                                                                              \
  template ModelParams<T> bind<T>(const ModelSpec&, std::span<const T>);                                        \
  template T encode<T>(const ModelSpec&, const ModelParams<T>&, const T&, std::vector<EncoderTrace<T>>*);        \
  template T classify<T>(const ModelSpec&, const ModelParams<T>&, const T&, std::vector<EncoderTrace<T>>*);      \
  template T decode<T>(const ModelSpec&, const ModelParams<T>&, const T&);

CRATE_INSTANTIATE_MODEL(Matrix)
CRATE_INSTANTIATE_MODEL(ad::Var)

#undef CRATE_INSTANTIATE_MODEL

}  // namespace crate
