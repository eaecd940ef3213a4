#include <benchmark/benchmark.h>

#include "crate/autodiff.hpp"
#include "crate/blocks.hpp"
#include "crate/gmm.hpp"
#include "crate/linalg.hpp"
#include "crate/losses.hpp"
#include "crate/model.hpp"
#include "crate/rate.hpp"
#include "crate/rng.hpp"

using namespace crate;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

ModelSpec bench_spec(std::size_t dim) {
  ModelSpec s;
  s.layers = 4;
  s.dim = dim;
  s.heads = 4;
  s.head_dim = dim / 4;
  s.tokens = 64;
  s.patch_dim = 48;
  s.classes = 10;
  return s;
}

}  // namespace

static void BM_LogdetGram(benchmark::State& state) {
  RngStream rng(1, 0);
  const auto d = std::size_t(state.range(0));
  const Matrix z = random_matrix(d, d / 2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(logdet_gram(z, 0.5));
}
BENCHMARK(BM_LogdetGram)->Arg(32)->Arg(128)->Arg(512);

static void BM_GradRcExact(benchmark::State& state) {
  RngStream rng(2, 0);
  const auto d = std::size_t(state.range(0));
  const Matrix z = random_matrix(d, 64, rng);
  const auto u = SubspaceBasisSet::random_orthonormal(d, d / 8, 8, rng);
  for (auto _ : state) benchmark::DoNotOptimize(grad_rc_exact(z, u, {}));
}
BENCHMARK(BM_GradRcExact)->Arg(64)->Arg(256);

static void BM_Mssa(benchmark::State& state) {
  RngStream rng(3, 0);
  const auto n = std::size_t(state.range(0));
  const auto u = SubspaceBasisSet::random_orthonormal(192, 64, 3, rng);
  const auto params = exact_basis_attention(u, 1.0, 0.125);
  const Matrix z = random_matrix(192, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(mssa(z, params));
}
BENCHMARK(BM_Mssa)->Arg(64)->Arg(197);

static void BM_EncoderForward(benchmark::State& state) {
  const ModelSpec spec = bench_spec(std::size_t(state.range(0)));
  const Model model = Model::initialize(spec, 4);
  const auto params = bind(model);
  RngStream rng(4, 0);
  const Matrix x = random_matrix(spec.patch_dim, spec.tokens, rng);
  for (auto _ : state) benchmark::DoNotOptimize(classify(spec, params, x));
}
BENCHMARK(BM_EncoderForward)->Arg(64)->Arg(192);

static void BM_EncoderForwardBackward(benchmark::State& state) {
  const ModelSpec spec = bench_spec(std::size_t(state.range(0)));
  const Model model = Model::initialize(spec, 5);
  const std::vector<Matrix> values = model.values();
  RngStream rng(5, 0);
  const Matrix x = random_matrix(spec.patch_dim, spec.tokens, rng);
  const ad::ScalarFn f = [&](ad::Tape&, std::span<const ad::Var> v) {
    return classification_loss(spec, crate::bind<ad::Var>(spec, v), x, 0, 0.0);
  };
  for (auto _ : state) benchmark::DoNotOptimize(ad::value_and_grad(f, values));
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(64)->Arg(192);

static void BM_GmmScore(benchmark::State& state) {
  RngStream rng(6, 0);
  const auto d = std::size_t(state.range(0));
  const auto model = GmmTokenModel::theorem_config(d, d / 8, 8, 0.1, rng);
  const GmmDensity density(model);
  const Matrix x = random_matrix(d, 1, rng);
  for (auto _ : state) benchmark::DoNotOptimize(density.score(x));
}
BENCHMARK(BM_GmmScore)->Arg(64)->Arg(256);
BENCHMARK_MAIN();
