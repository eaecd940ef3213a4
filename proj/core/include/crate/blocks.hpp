#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "crate/autodiff.hpp"
#include "crate/linalg.hpp"
#include "crate/matrix.hpp"
#include "crate/rate.hpp"

// Network blocks. Every block is a template over the tensor type T, which is
// either crate::Matrix (plain forward evaluation) or crate::ad::Var (forward
// pass recorded on a tape for training); explicit instantiations for both
// live in blocks.cpp.
namespace crate {

enum class AttentionMode {
  ExactBasis,  // output map fixed to beta [U_1, ..., U_K]
  Trainable,   // output map is a free d x (pK) matrix (optionally biased)
};

enum class MaskKind { None, Causal };

struct AttentionMask {
  MaskKind kind = MaskKind::None;
  CausalConvention convention = CausalConvention::Literal;
  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;
};

enum class StepVariant {
  Skip,    // Z + MSSA(Z)
  Convex,  // (1 - beta kappa) Z + beta kappa MSSA(Z)
};

template <class T>
struct LayerNormParams {
  T gain;  // d x 1
  T bias;  // d x 1
  double eps = 1e-5;
};

template <class T>
struct AttentionParams {
  AttentionMode mode = AttentionMode::Trainable;
  T qkv;                      // (pK) x d; row block k is U_k^T
  std::optional<T> out;       // d x (pK); absent in Trainable mode means identity (pK == d)
  std::optional<T> out_bias;  // d x 1
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  double scale = 1.0;  // softmax temperature; p^{-1/2} by default in models
  double beta = 1.0;   // output factor in ExactBasis mode
};

struct IstaParams {
  double eta = 0.1;
  double lambda = 0.1;
};

template <class T>
struct EncoderLayerParams {
  AttentionParams<T> attn;
  T dict;  // D, d x d
  LayerNormParams<T> ln1;
  LayerNormParams<T> ln2;
};

template <class T>
struct DecoderLayerParams {
  AttentionParams<T> attn;  // attention over the anti-compression bases V
  T synth;                  // E, d x d
  LayerNormParams<T> ln1;
  LayerNormParams<T> ln2;
};

template <class T>
struct EmbeddingParams {
  std::optional<LayerNormParams<T>> norm_in;   // over raw patch dimension D
  T w_pre;                                     // d x D
  std::optional<T> b_pre;                      // d x 1
  std::optional<LayerNormParams<T>> norm_out;  // over d
  T pos;                                       // d x n
  std::optional<T> cls;                        // d x 1
};

template <class T>
struct HeadParams {
  std::optional<LayerNormParams<T>> norm;
  T weight;  // C x d
  std::optional<T> bias;
};

template <class T>
struct EncoderTrace {
  T half;  // after the compression step
  T out;   // after the ISTA step
};

// Single subspace self-attention head: (U^T Z) softmax(scale (U^T Z)^T (U^T Z)).
// `proj` is U^T (p x d).
template <class T>
T ssa_head(const T& z, const T& proj, double scale, AttentionMask mask);

// Same head from a d x p basis.
Matrix ssa(const Matrix& z, const Matrix& u_k, double scale, AttentionMask mask = {});

template <class T>
T mssa(const T& z, const AttentionParams<T>& params, AttentionMask mask = {});

template <class T>
T compression_step(const T& z, const AttentionParams<T>& params, const RateParams& rate, StepVariant variant,
                   AttentionMask mask = {});

template <class T>
T ista_step(const T& z, const T& dict, IstaParams ista);

Matrix prox_mm_step(const Matrix& z, const Matrix& dict, const RateParams& rate);

template <class T>
T apply_layer_norm(const T& z, const LayerNormParams<T>& ln);

// Z_half = MSSA(ln1(Z)) + ln1(Z); out = ISTA(ln2(Z_half)). The residual adds
// ln1(Z), not Z.
template <class T>
EncoderTrace<T> encoder_layer(const T& z, const EncoderLayerParams<T>& layer, IstaParams ista, AttentionMask mask = {});

// Z_half = E ln1(Z); out = ln2(Z_half) - MSSA(ln2(Z_half) | V).
template <class T>
T decoder_layer(const T& z, const DecoderLayerParams<T>& layer, AttentionMask mask = {});

// [cls, W_pre X] + E_pos, or W_pre X + E_pos without a class token.
template <class T>
T preprocess(const T& x, const EmbeddingParams<T>& emb);

// W_post (Z - E_pos).
template <class T>
T postprocess(const T& z, const T& pos, const T& w_post);

// Head applied to the class-token feature z_1.
template <class T>
T classifier_head(const T& z, const HeadParams<T>& head);

// Head applied to the token average (1/n) Z 1.
template <class T>
T pooling_head(const T& z, const HeadParams<T>& head);

// Matrix-only helper: Exact-basis attention parameters from a basis set.
AttentionParams<Matrix> exact_basis_attention(const SubspaceBasisSet& u, double beta, double scale);

}  // namespace crate
