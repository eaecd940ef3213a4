#include "crate/blocks.hpp"

#include <cmath>

#include "crate/error.hpp"

namespace crate {

namespace {

Matrix lift(const Matrix&, Matrix m) { return m; }
ad::Var lift(const ad::Var& like, Matrix m) { return like.tape()->constant(std::move(m)); }

const Matrix& value_of(const Matrix& m) { return m; }
const Matrix& value_of(const ad::Var& v) { return v.value(); }

template <class T>
T output_map(const AttentionParams<T>& params) {
  // beta [U_1..U_K] is formed before the product so that a Trainable layer
  // whose W equals it reproduces this output bit-for-bit.
  return params.beta * transpose(params.qkv);
}

template <class T>
void check_attention(const T& z, const AttentionParams<T>& params) {
  const Matrix& q = value_of(params.qkv);
  if (params.heads == 0 || params.head_dim == 0) throw InvalidArgument("attention: heads and head_dim must be positive");
  if (q.rows() != params.heads * params.head_dim)
    throw ShapeMismatch("attention: qkv has " + std::to_string(q.rows()) + " rows, expected heads*head_dim = " +
                        std::to_string(params.heads * params.head_dim));
  if (q.cols() != value_of(z).rows()) throw ShapeMismatch("attention: qkv width != token dimension");
  if (!(params.scale > 0.0)) throw InvalidArgument("attention: scale must be positive");
}

}  // namespace

template <class T>
T ssa_head(const T& z, const T& proj, double scale, AttentionMask mask) {
  const T y = matmul(proj, z);
  T logits = scale * matmul(transpose(y), y);
  if (mask.kind == MaskKind::Causal) logits = causal_mask(logits, mask.convention);
  return matmul(y, softmax_columns(logits));
}

Matrix ssa(const Matrix& z, const Matrix& u_k, double scale, AttentionMask mask) {
  if (u_k.rows() != z.rows()) throw ShapeMismatch("ssa: basis dimension != token dimension");
  return ssa_head(z, transpose(u_k), scale, mask);
}

template <class T>
T mssa(const T& z, const AttentionParams<T>& params, AttentionMask mask) {
  check_attention(z, params);
  const std::size_t p = params.head_dim;
  const T w = matmul(params.qkv, z);
  std::vector<T> heads;
  heads.reserve(params.heads);
  for (std::size_t k = 0; k < params.heads; ++k) {
    const T y = slice_rows(w, k * p, (k + 1) * p);
    T logits = params.scale * matmul(transpose(y), y);
    if (mask.kind == MaskKind::Causal) logits = causal_mask(logits, mask.convention);
    heads.push_back(matmul(y, softmax_columns(logits)));
  }
  const T stacked = heads.size() == 1 ? heads.front() : concat_rows(std::span<const T>(heads));
  if (params.mode == AttentionMode::ExactBasis) return matmul(output_map(params), stacked);
  T out = params.out ? matmul(*params.out, stacked) : stacked;
  if (!params.out && value_of(stacked).rows() != value_of(z).rows())
    throw ShapeMismatch("mssa: identity output map needs heads*head_dim == d");
  if (params.out_bias) out = add_colvec(out, *params.out_bias);
  return out;
}

template <class T>
T compression_step(const T& z, const AttentionParams<T>& params, const RateParams& rate, StepVariant variant,
                   AttentionMask mask) {
  const T m = mssa(z, params, mask);
  if (variant == StepVariant::Skip) return z + m;
  const double bk = rate.beta(params.head_dim, value_of(z).cols()) * rate.kappa;
  return (1.0 - bk) * z + bk * m;
}

template <class T>
T ista_step(const T& z, const T& dict, IstaParams ista) {
  if (!(ista.eta > 0.0) || !(ista.lambda >= 0.0)) throw InvalidArgument("ista_step: need eta > 0, lambda >= 0");
  const T residual = matmul(dict, z) - z;
  const T moved = z - ista.eta * matmul(transpose(dict), residual);
  return relu(add_scalar(moved, -ista.eta * ista.lambda));
}

Matrix prox_mm_step(const Matrix& z, const Matrix& dict, const RateParams& rate) {
  const double alpha = rate.alpha(z.rows(), z.cols());
  const double coeff = 1.0 + 4.0 / (9.0 * (1.0 + alpha));
  const double threshold = 4.0 * rate.lambda / (9.0 * alpha);
  return relu(add_scalar(coeff * matmul_tn(dict, z), -threshold));
}

template <class T>
T apply_layer_norm(const T& z, const LayerNormParams<T>& ln) {
  return layer_norm(z, ln.gain, ln.bias, ln.eps);
}

template <class T>
EncoderTrace<T> encoder_layer(const T& z, const EncoderLayerParams<T>& layer, IstaParams ista, AttentionMask mask) {
  const T normed = apply_layer_norm(z, layer.ln1);
  EncoderTrace<T> trace{mssa(normed, layer.attn, mask) + normed, T{}};
  trace.out = ista_step(apply_layer_norm(trace.half, layer.ln2), layer.dict, ista);
  return trace;
}

template <class T>
T decoder_layer(const T& z, const DecoderLayerParams<T>& layer, AttentionMask mask) {
  const T half = matmul(layer.synth, apply_layer_norm(z, layer.ln1));
  const T normed = apply_layer_norm(half, layer.ln2);
  return normed - mssa(normed, layer.attn, mask);
}

template <class T>
T preprocess(const T& x, const EmbeddingParams<T>& emb) {
  T h = emb.norm_in ? apply_layer_norm(x, *emb.norm_in) : x;
  h = matmul(emb.w_pre, h);
  if (emb.b_pre) h = add_colvec(h, *emb.b_pre);
  if (emb.norm_out) h = apply_layer_norm(h, *emb.norm_out);
  if (emb.cls) {
    const std::vector<T> parts = {*emb.cls, h};
    h = concat_cols(std::span<const T>(parts));
  }
  if (value_of(h).cols() != value_of(emb.pos).cols() || value_of(h).rows() != value_of(emb.pos).rows())
    throw ShapeMismatch("preprocess: positional encoding is " + value_of(emb.pos).shape_string() + ", tokens are " +
                        value_of(h).shape_string());
  return h + emb.pos;
}

template <class T>
T postprocess(const T& z, const T& pos, const T& w_post) {
  return matmul(w_post, z - pos);
}

namespace {

template <class T>
T apply_head(const T& feature, const HeadParams<T>& head) {
  T f = head.norm ? apply_layer_norm(feature, *head.norm) : feature;
  T logits = matmul(head.weight, f);
  if (head.bias) logits = add_colvec(logits, *head.bias);
  return logits;
}

}  // namespace

template <class T>
T classifier_head(const T& z, const HeadParams<T>& head) {
  if (value_of(z).cols() == 0) throw ShapeMismatch("classifier_head: no tokens");
  return apply_head(slice_cols(z, 0, 1), head);
}

template <class T>
T pooling_head(const T& z, const HeadParams<T>& head) {
  const std::size_t n = value_of(z).cols();
  if (n == 0) throw ShapeMismatch("pooling_head: no tokens");
  const T mean = (1.0 / double(n)) * matmul(z, lift(z, Matrix(n, 1, 1.0)));
  return apply_head(mean, head);
}

AttentionParams<Matrix> exact_basis_attention(const SubspaceBasisSet& u, double beta, double scale) {
  u.validate();
  AttentionParams<Matrix> a;
  a.mode = AttentionMode::ExactBasis;
  a.qkv = u.projection();
  a.heads = u.K();
  a.head_dim = u.p();
  a.scale = scale;
  a.beta = beta;
  return a;
}

#define CRATE_INSTANTIATE_BLOCKS(T)                                                                        \
  template T ssa_head<T>(const T&, const T&, double, AttentionMask);                                      \
  template T mssa<T>(const T&, const AttentionParams<T>&, AttentionMask);                                 \
  template T compression_step<T>(const T&, const AttentionParams<T>&, const RateParams&, StepVariant,      \
                                 AttentionMask);                                                          \
  template T ista_step<T>(const T&, const T&, IstaParams);                                                \
  template T apply_layer_norm<T>(const T&, const LayerNormParams<T>&);                                    \
  template EncoderTrace<T> encoder_layer<T>(const T&, const EncoderLayerParams<T>&, IstaParams, AttentionMask); \
  template T decoder_layer<T>(const T&, const DecoderLayerParams<T>&, AttentionMask);                     \
  template T preprocess<T>(const T&, const EmbeddingParams<T>&);                                          \
  template T postprocess<T>(const T&, const T&, const T&);                                                \
  template T classifier_head<T>(const T&, const HeadParams<T>&);                                          \
  template T pooling_head<T>(const T&, const HeadParams<T>&);

CRATE_INSTANTIATE_BLOCKS(Matrix)
CRATE_INSTANTIATE_BLOCKS(ad::Var)

#undef CRATE_INSTANTIATE_BLOCKS

}  // namespace crate
