#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "crate/autodiff.hpp"
#include "crate/blocks.hpp"
#include "crate/error.hpp"
#include "crate/linalg.hpp"
#include "crate/rate.hpp"
#include "support.hpp"

using namespace crate;
using crate::testing::random_matrix;

namespace {

LayerNormParams<Matrix> identity_ln(std::size_t d) { return {Matrix(d, 1, 1.0), Matrix(d, 1, 0.0), 1e-5}; }

AttentionParams<Matrix> trainable(const Matrix& qkv, std::size_t heads, std::size_t p, std::optional<Matrix> out) {
  AttentionParams<Matrix> a;
  a.mode = AttentionMode::Trainable;
  a.qkv = qkv;
  a.heads = heads;
  a.head_dim = p;
  a.scale = 1.0 / std::sqrt(double(p));
  a.out = std::move(out);
  return a;
}

double lasso(const Matrix& z, const Matrix& z_in, const Matrix& dict, double lambda) {
  return lambda * l1_norm(z) + 0.5 * squared_norm(z_in - matmul(dict, z));
}

}  // namespace

TEST(Ssa, SingleTokenPassesProjectionThrough) {
  RngStream rng(300, 0);
  const Matrix z = random_matrix(5, 1, rng);
  const Matrix u = random_orthonormal(5, 2, rng);
  EXPECT_LT(max_abs_diff(ssa(z, u, 0.7), matmul_tn(u, z)), 1e-15);
}

TEST(Ssa, ZeroBasisGivesZero) {
  RngStream rng(301, 0);
  EXPECT_EQ(max_abs(ssa(random_matrix(5, 4, rng), Matrix(5, 2), 1.0)), 0.0);
}

TEST(Ssa, TwoTokensHandEvaluated) {
  // U = e1 in R^2, tokens z1 = (1, 5), z2 = (2, -1): projections y = (1, 2).
  const Matrix z{{1, 2}, {5, -1}};
  const Matrix u{{1}, {0}};
  const double scale = 0.5;
  // logits[i][j] = scale * y_i y_j
  const double a11 = 0.5, a12 = 1.0, a22 = 2.0;
  const double c1 = 1.0 / (1.0 + std::exp(a12 - a11));  // column 1 weight on token 1
  const double c2 = 1.0 / (1.0 + std::exp(a22 - a12));  // column 2 weight on token 1
  const Matrix out = ssa(z, u, scale);
  EXPECT_NEAR(out(0, 0), 1.0 * c1 + 2.0 * (1.0 - c1), 1e-14);
  EXPECT_NEAR(out(0, 1), 1.0 * c2 + 2.0 * (1.0 - c2), 1e-14);
}

TEST(CausalMaskBlock, Examples) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(causal_mask(Matrix{{3.0}}), (Matrix{{3.0}}));
  EXPECT_EQ(causal_mask(Matrix{{1, 2}, {3, 4}}), (Matrix{{1, 2}, {-inf, 4}}));
  const Matrix s = softmax_columns(causal_mask(Matrix{{1, 2}, {3, 4}}));
  EXPECT_EQ(s(0, 0), 1.0);
  EXPECT_EQ(s(1, 0), 0.0);
}

TEST(CausalMaskBlock, OutputTokenIgnoresLaterTokens) {
  RngStream rng(302, 0);
  const Matrix z = random_matrix(6, 5, rng);
  const auto attn = trainable(random_matrix(4, 6, rng), 2, 2, random_matrix(6, 4, rng));
  const AttentionMask causal{MaskKind::Causal, CausalConvention::Literal};
  const Matrix base = mssa(z, attn, causal);
  for (std::size_t j = 0; j + 1 < 5; ++j) {
    Matrix edited = z;
    for (std::size_t col = j + 1; col < 5; ++col)
      for (std::size_t r = 0; r < 6; ++r) edited(r, col) += 3.0;
    const Matrix out = mssa(edited, attn, causal);
    for (std::size_t col = 0; col <= j; ++col)
      for (std::size_t r = 0; r < 6; ++r) EXPECT_DOUBLE_EQ(out(r, col), base(r, col));
  }
}

TEST(Mssa, ZeroInputGivesZero) {
  RngStream rng(303, 0);
  const auto u = SubspaceBasisSet::random_orthonormal(6, 2, 3, rng);
  EXPECT_EQ(max_abs(mssa(Matrix(6, 4), exact_basis_attention(u, 1.5, 0.5))), 0.0);
}

TEST(Mssa, SingleHeadExactBasis) {
  RngStream rng(304, 0);
  const auto u = SubspaceBasisSet::random_orthonormal(6, 2, 1, rng);
  const Matrix z = random_matrix(6, 4, rng);
  const Matrix expected = 1.5 * matmul(u.bases[0], ssa(z, u.bases[0], 0.5));
  EXPECT_LT(max_abs_diff(mssa(z, exact_basis_attention(u, 1.5, 0.5)), expected), 1e-13);
}

TEST(Mssa, TrainableWithBetaStackedBasesIsBitIdentical) {
  RngStream rng(305, 0);
  const auto u = SubspaceBasisSet::random_orthonormal(8, 2, 3, rng);
  const Matrix z = random_matrix(8, 5, rng);
  const double beta = 1.7;
  const auto exact = exact_basis_attention(u, beta, 0.3);
  auto train = trainable(u.projection(), 3, 2, beta * u.stacked());
  train.scale = 0.3;
  EXPECT_EQ(mssa(z, exact), mssa(z, train));
}

TEST(Mssa, PermutationEquivariantWithoutMask) {
  RngStream rng(306, 0);
  const Matrix z = random_matrix(6, 5, rng);
  const auto attn = trainable(random_matrix(4, 6, rng), 2, 2, random_matrix(6, 4, rng));
  const auto perm = rng.permutation(5);
  const Matrix lhs = mssa(select_cols(z, perm), attn);
  const Matrix rhs = select_cols(mssa(z, attn), perm);
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-13);
}

TEST(Mssa, ShapeErrors) {
  RngStream rng(307, 0);
  const auto attn = trainable(random_matrix(4, 6, rng), 2, 2, std::nullopt);
  EXPECT_THROW(mssa(random_matrix(5, 3, rng), attn), ShapeMismatch);
  EXPECT_THROW(mssa(random_matrix(6, 3, rng), attn), ShapeMismatch);  // identity map needs pK == d
  EXPECT_THROW(mssa(random_matrix(6, 3, rng), trainable(random_matrix(5, 6, rng), 2, 2, std::nullopt)), ShapeMismatch);
}

TEST(CompressionStep, VariantsCollapse) {
  RngStream rng(308, 0);
  const Matrix z = random_matrix(6, 4, rng);
  auto zero_out = trainable(random_matrix(4, 6, rng), 2, 2, Matrix(6, 4));
  RateParams rate;
  EXPECT_EQ(compression_step(z, zero_out, rate, StepVariant::Skip), z);
  const double beta = rate.beta(2, 4);
  EXPECT_LT(max_abs_diff(compression_step(z, zero_out, rate, StepVariant::Convex), (1.0 - beta) * z), 1e-15);
  rate.kappa = 1.0 / beta;
  const auto u = SubspaceBasisSet::random_orthonormal(6, 2, 3, rng);
  const auto exact = exact_basis_attention(u, beta, 1.0);
  EXPECT_LT(max_abs_diff(compression_step(z, exact, rate, StepVariant::Convex), mssa(z, exact)), 1e-14);
}

TEST(IstaStep, IdentityDictionaryIsShiftedRelu) {
  RngStream rng(309, 0);
  const Matrix z = random_matrix(5, 4, rng);
  EXPECT_EQ(ista_step(z, Matrix::identity(5), {0.1, 0.3}), relu(add_scalar(z, -0.03)));
  EXPECT_EQ(max_abs(ista_step(Matrix(5, 4), random_matrix(5, 5, rng), {0.1, 0.3})), 0.0);
  EXPECT_THROW(ista_step(z, Matrix::identity(5), {0.0, 0.1}), InvalidArgument);
}

TEST(IstaStep, NonnegativeAndLassoDescentForOrthogonalDictionaries) {
  RngStream rng(310, 0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 2 + rng.index(10), n = 1 + rng.index(8);
    const Matrix dict = random_orthonormal(d, d, rng);
    const Matrix z_in = random_matrix(d, n, rng);
    const IstaParams ista{rng.uniform(0.01, 1.0), rng.uniform(0.0, 0.5)};
    const Matrix out = ista_step(z_in, dict, ista);
    for (double v : out.values()) EXPECT_GE(v, 0.0);
    EXPECT_LE(lasso(out, z_in, dict, ista.lambda), lasso(relu(z_in), z_in, dict, ista.lambda) + 1e-12);
  }
}

TEST(ProxMm, Examples) {
  RngStream rng(311, 0);
  const Matrix z = random_matrix(4, 3, rng);
  RateParams rate;
  EXPECT_EQ(max_abs(prox_mm_step(Matrix(4, 3), Matrix::identity(4), rate)), 0.0);
  rate.epsilon = 1e-6;  // alpha -> infinity
  EXPECT_LT(max_abs_diff(prox_mm_step(z, Matrix::identity(4), rate), relu(z)), 1e-9);
  // Single entry, alpha = 2 (d = n = 1, eps^2 = 1/2), lambda = 0.9, z = 1.5.
  rate.epsilon = std::sqrt(0.5);
  rate.lambda = 0.9;
  const double expected = (1.0 + 4.0 / 27.0) * 1.5 - 4.0 * 0.9 / 18.0;
  EXPECT_NEAR(prox_mm_step(Matrix{{1.5}}, Matrix{{1.0}}, rate)[0], expected, 1e-15);
}

TEST(LayerNormBlock, Examples) {
  const Matrix bias{{0.5}, {-1.0}, {2.0}};
  const LayerNormParams<Matrix> ln{Matrix(3, 1, 1.7), bias, 1e-5};
  EXPECT_LT(max_abs_diff(apply_layer_norm(Matrix(3, 2, 4.0), ln), concat_cols(std::vector{bias, bias})), 1e-12);
  RngStream rng(312, 0);
  const Matrix z = random_matrix(3, 2, rng);
  const LayerNormParams<Matrix> zero_gain{Matrix(3, 1), bias, 1e-5};
  EXPECT_EQ(apply_layer_norm(z, zero_gain), concat_cols(std::vector{bias, bias}));
  const Matrix y = apply_layer_norm(z, identity_ln(3));
  for (std::size_t j = 0; j < 2; ++j) {
    const double mean = (z(0, j) + z(1, j) + z(2, j)) / 3.0;
    double var = 0.0;
    for (std::size_t i = 0; i < 3; ++i) var += (z(i, j) - mean) * (z(i, j) - mean) / 3.0;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y(i, j), (z(i, j) - mean) / std::sqrt(var + 1e-5), 1e-13);
  }
}

TEST(EncoderLayer, CollapsedBlocks) {
  RngStream rng(313, 0);
  const Matrix z = random_matrix(6, 4, rng);
  EncoderLayerParams<Matrix> layer{trainable(random_matrix(4, 6, rng), 2, 2, Matrix(6, 4)), Matrix::identity(6),
                                   identity_ln(6), identity_ln(6)};
  const auto trace = encoder_layer(z, layer, IstaParams{0.1, 0.0});
  const Matrix ln1 = apply_layer_norm(z, layer.ln1);
  EXPECT_EQ(trace.half, ln1);
  EXPECT_EQ(trace.out, relu(apply_layer_norm(ln1, layer.ln2)));
  EXPECT_EQ(trace.out.rows(), 6u);
  EXPECT_EQ(trace.out.cols(), 4u);
}

TEST(EncoderLayer, CompositionOfParts) {
  RngStream rng(314, 0);
  const Matrix z = random_matrix(6, 3, rng);
  EncoderLayerParams<Matrix> layer{trainable(random_matrix(4, 6, rng), 2, 2, random_matrix(6, 4, rng)),
                                   random_matrix(6, 6, rng), identity_ln(6), identity_ln(6)};
  layer.ln2.bias = random_matrix(6, 1, rng);
  const IstaParams ista{0.1, 0.1};
  const auto trace = encoder_layer(z, layer, ista);
  const Matrix n1 = apply_layer_norm(z, layer.ln1);
  const Matrix half = mssa(n1, layer.attn) + n1;
  EXPECT_EQ(trace.half, half);
  EXPECT_EQ(trace.out, ista_step(apply_layer_norm(half, layer.ln2), layer.dict, ista));
}

TEST(EncoderLayer, GradientMatchesFiniteDifferences) {
  RngStream rng(315, 0);
  const std::size_t d = 8, n = 5, heads = 2, p = 4;
  const Matrix z = random_matrix(d, n, rng);
  const Matrix weight = random_matrix(d, n, rng);
  // Parameters: qkv, out, out_bias, dict, ln1 gain/bias, ln2 gain/bias.
  std::vector<Matrix> at = {random_matrix(heads * p, d, rng, 0.5), random_matrix(d, heads * p, rng, 0.5),
                            random_matrix(d, 1, rng, 0.1),       random_matrix(d, d, rng, 0.4),
                            add_scalar(random_matrix(d, 1, rng, 0.1), 1.0), random_matrix(d, 1, rng, 0.1),
                            add_scalar(random_matrix(d, 1, rng, 0.1), 1.0), random_matrix(d, 1, rng, 0.1)};
  const ad::ScalarFn f = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    EncoderLayerParams<ad::Var> layer;
    layer.attn.mode = AttentionMode::Trainable;
    layer.attn.qkv = v[0];
    layer.attn.out = v[1];
    layer.attn.out_bias = v[2];
    layer.attn.heads = heads;
    layer.attn.head_dim = p;
    layer.attn.scale = 0.5;
    layer.dict = v[3];
    layer.ln1 = {v[4], v[5], 1e-5};
    layer.ln2 = {v[6], v[7], 1e-5};
    const auto trace = encoder_layer(tape.constant(z), layer, IstaParams{0.1, 0.1});
    return ad::sum(ad::hadamard(trace.out, tape.constant(weight)));
  };
  const auto vg = ad::value_and_grad(f, at);
  const auto fd = ad::finite_difference_grad(f, at);
  for (std::size_t i = 0; i < at.size(); ++i) EXPECT_LE(relative_error(vg.grads[i], fd[i], 1e-12), 1e-4) << i;
}

TEST(DecoderLayer, CollapsedZeroAndComposition) {
  RngStream rng(316, 0);
  const Matrix z = random_matrix(6, 4, rng);
  DecoderLayerParams<Matrix> layer{trainable(random_matrix(4, 6, rng), 2, 2, Matrix(6, 4)), Matrix::identity(6),
                                   identity_ln(6), identity_ln(6)};
  EXPECT_EQ(decoder_layer(z, layer), apply_layer_norm(apply_layer_norm(z, layer.ln1), layer.ln2));
  EXPECT_EQ(max_abs(decoder_layer(Matrix(6, 4), layer)), 0.0);
  layer.attn.out = random_matrix(6, 4, rng);
  layer.synth = random_matrix(6, 6, rng);
  const Matrix normed = apply_layer_norm(matmul(layer.synth, apply_layer_norm(z, layer.ln1)), layer.ln2);
  EXPECT_EQ(decoder_layer(z, layer), normed - mssa(normed, layer.attn));
}

TEST(Preprocess, Examples) {
  RngStream rng(317, 0);
  EmbeddingParams<Matrix> emb;
  emb.w_pre = random_matrix(4, 3, rng);
  emb.pos = Matrix(4, 6);
  emb.cls = Matrix(4, 1);
  EXPECT_EQ(max_abs(preprocess(Matrix(3, 5), emb)), 0.0);
  EXPECT_EQ(preprocess(Matrix(3, 5), emb).cols(), 6u);
  const Matrix x = random_matrix(3, 5, rng);
  emb.pos = random_matrix(4, 6, rng);
  emb.cls = random_matrix(4, 1, rng);
  const Matrix expected = concat_cols(std::vector{*emb.cls, matmul(emb.w_pre, x)}) + emb.pos;
  EXPECT_LT(max_abs_diff(preprocess(x, emb), expected), 1e-14);
  emb.cls.reset();
  EXPECT_THROW(preprocess(x, emb), ShapeMismatch);
}

TEST(Heads, ClassifierAndPooling) {
  RngStream rng(318, 0);
  const Matrix z = random_matrix(4, 5, rng);
  HeadParams<Matrix> head{std::nullopt, Matrix(3, 4), std::nullopt};
  EXPECT_EQ(max_abs(classifier_head(z, head)), 0.0);
  head.weight = Matrix{{0, 1, 0, 0}, {0, 0, 0, 1}, {1, 0, 0, 0}};
  EXPECT_EQ(classifier_head(z, head), (Matrix{{z(1, 0)}, {z(3, 0)}, {z(0, 0)}}));
  head.weight = random_matrix(3, 4, rng);
  EXPECT_LT(max_abs_diff(classifier_head(z, head), matmul(head.weight, z.col(0))), 1e-15);
  const Matrix constant = concat_cols(std::vector{z.col(2), z.col(2), z.col(2)});
  EXPECT_LT(max_abs_diff(pooling_head(constant, head), matmul(head.weight, z.col(2))), 1e-14);
  EXPECT_EQ(max_abs(pooling_head(Matrix(4, 3), head)), 0.0);
  EXPECT_LT(max_abs_diff(pooling_head(z, head), (1.0 / 5.0) * matmul(head.weight, row_sums(z))), 1e-14);
}
