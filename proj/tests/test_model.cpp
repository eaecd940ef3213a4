#include <cmath>

#include <gtest/gtest.h>

#include "crate/autodiff.hpp"
#include "crate/error.hpp"
#include "crate/model.hpp"
#include "support.hpp"

using namespace crate;
using crate::testing::random_matrix;

namespace {

ModelSpec small_classifier() {
  ModelSpec s;
  s.layers = 2;
  s.dim = 8;
  s.heads = 2;
  s.head_dim = 4;
  s.tokens = 4;
  s.patch_dim = 6;
  s.classes = 3;
  return s;
}

ModelSpec small_autoencoder() {
  ModelSpec s = small_classifier();
  s.decoder_layers = 2;
  s.class_token = false;
  return s;
}

}  // namespace

TEST(ParameterCount, ReferenceConfigurations) {
  const double tiny = double(parameter_count(crate_tiny()));
  const double base = double(parameter_count(crate_base()));
  EXPECT_NEAR(tiny, 6.09e6, 0.03 * 6.09e6);
  EXPECT_NEAR(base, 22.80e6, 0.03 * 22.80e6);
  EXPECT_EQ(parameter_count(crate_tiny()), 6090856u);
  EXPECT_EQ(parameter_count(crate_base()), 22796008u);
}

TEST(ParameterCount, HandCountedSingleLayer) {
  ModelSpec s;
  s.layers = 1;
  s.dim = 2;
  s.heads = 1;
  s.head_dim = 2;
  std::size_t encoder = 0;
  for (const auto& t : parameter_shapes(s))
    if (t.name.rfind("encoder.", 0) == 0) encoder += t.size();
  // norm1 (2 + 2) + qkv (2 x 2) + norm2 (2 + 2) + dictionary (2 x 2); no
  // output projection when K = 1 and p = d.
  EXPECT_EQ(encoder, 16u);
}

TEST(ParameterCount, ComponentsSumToTotal) {
  const ModelSpec s = small_classifier();
  std::size_t total = 0;
  for (const auto& t : parameter_shapes(s)) total += t.size();
  EXPECT_EQ(total, parameter_count(s));
  const std::size_t d = 8, D = 6, n = 5, pk = 8, C = 3;
  const std::size_t per_layer = 2 * d + pk * d + d * pk + d + 2 * d + d * d;
  const std::size_t embed = 2 * D + d * D + d + 2 * d + d * n + d;
  const std::size_t head = 2 * d + C * d + C;
  EXPECT_EQ(total, embed + 2 * per_layer + head);
}

TEST(ModelSpec, JsonRoundTripAndValidation) {
  ModelSpec s = small_autoencoder();
  s.mask.kind = MaskKind::Causal;
  s.step = StepVariant::Convex;
  s.attention_mode = AttentionMode::ExactBasis;
  EXPECT_EQ(model_spec_from_json(to_json(s)), s);
  auto j = to_json(s);
  j.erase("heads");
  EXPECT_THROW(model_spec_from_json(j), FormatError);
  j = to_json(s);
  j["step"] = "sideways";
  EXPECT_THROW(model_spec_from_json(j), InvalidArgument);
  ModelSpec bad = small_classifier();
  bad.dim = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = small_autoencoder();
  bad.class_token = true;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Model, InitializationIsDeterministicAndFollowsSchemes) {
  const ModelSpec s = small_classifier();
  const Model a = Model::initialize(s, 7), b = Model::initialize(s, 7), c = Model::initialize(s, 8);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
  const auto shapes = parameter_shapes(s);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Matrix& v = a.tensors()[i].value;
    EXPECT_EQ(a.tensors()[i].name, shapes[i].name);
    const double bound_lin = 1.0 / std::sqrt(double(shapes[i].cols));
    switch (shapes[i].init) {
      case InitKind::LinearUniform: EXPECT_LE(max_abs(v), bound_lin); break;
      case InitKind::KaimingUniform: EXPECT_LE(max_abs(v), std::sqrt(6.0) * bound_lin); break;
      case InitKind::Normal002: EXPECT_LT(max_abs(v), 0.02 * 6.0); break;
      case InitKind::Ones: EXPECT_EQ(v, Matrix(v.rows(), v.cols(), 1.0)); break;
      case InitKind::Zeros: EXPECT_EQ(max_abs(v), 0.0); break;
    }
  }
}

TEST(Model, ForwardShapesAndTapeAgreement) {
  const ModelSpec s = small_classifier();
  const Model m = Model::initialize(s, 3);
  RngStream rng(400, 0);
  const Matrix x = random_matrix(s.patch_dim, s.tokens, rng);
  std::vector<EncoderTrace<Matrix>> trace;
  const Matrix z = encode(s, bind(m), x, &trace);
  EXPECT_EQ(z.rows(), s.dim);
  EXPECT_EQ(z.cols(), s.tokens + 1);
  EXPECT_EQ(trace.size(), s.layers);
  const Matrix logits = classify(s, bind(m), x);
  EXPECT_EQ(logits.rows(), s.classes);
  EXPECT_EQ(logits.cols(), 1u);

  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : m.tensors()) vars.push_back(tape.variable(t.value));
  const auto params = crate::bind<ad::Var>(s, std::span<const ad::Var>(vars));
  EXPECT_EQ(classify(s, params, tape.constant(x)).value(), logits);
}

TEST(Model, AutoencoderReconstructsRawShape) {
  const ModelSpec s = small_autoencoder();
  const Model m = Model::initialize(s, 4);
  RngStream rng(401, 0);
  const Matrix x = random_matrix(s.patch_dim, s.tokens, rng);
  const auto params = bind(m);
  const Matrix y = decode(s, params, encode(s, params, x));
  EXPECT_EQ(y.rows(), s.patch_dim);
  EXPECT_EQ(y.cols(), s.tokens);
  EXPECT_THROW(classify(s, params, x), InvalidArgument);
}

TEST(Model, ShapeErrorsAndLookup) {
  const ModelSpec s = small_classifier();
  Model m = Model::initialize(s, 5);
  EXPECT_THROW(m.param("encoder.9.ista.dict"), InvalidArgument);
  EXPECT_EQ(m.param("encoder.1.ista.dict").rows(), s.dim);
  auto tensors = m.tensors();
  tensors.pop_back();
  EXPECT_THROW(Model(s, tensors), ShapeMismatch);
  RngStream rng(402, 0);
  EXPECT_THROW(encode(s, bind(m), random_matrix(s.patch_dim, s.tokens + 1, rng)), ShapeMismatch);
}

TEST(Model, ExactBasisModeHasNoOutputProjection) {
  ModelSpec s = small_classifier();
  s.attention_mode = AttentionMode::ExactBasis;
  for (const auto& t : parameter_shapes(s)) EXPECT_EQ(t.name.find(".attn.out"), std::string::npos) << t.name;
  const Model m = Model::initialize(s, 6);
  RngStream rng(403, 0);
  EXPECT_TRUE(all_finite(classify(s, bind(m), random_matrix(s.patch_dim, s.tokens, rng))));
}
