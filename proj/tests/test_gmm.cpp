#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "crate/error.hpp"
#include "crate/gmm.hpp"
#include "crate/linalg.hpp"
#include "support.hpp"

using namespace crate;
using crate::testing::random_matrix;

namespace {

GmmTokenModel single_gaussian(const Matrix& u, std::vector<double> var, double sigma) {
  GmmTokenModel m;
  m.bases = {{u}};
  m.coeff = CoeffConvention::Diagonal;
  m.coeff_var = {std::move(var)};
  m.mixture = {1.0};
  m.sigma = sigma;
  m.noise = NoiseConvention::PerCoordinate;
  return m;
}

// Two components in R^3 with different spreads and weights.
GmmTokenModel uneven_mixture(RngStream& rng, double sigma) {
  GmmTokenModel m;
  m.bases = SubspaceBasisSet::random_orthonormal(3, 2, 2, rng);
  m.coeff = CoeffConvention::Diagonal;
  m.coeff_var = {{1.5, 0.4}, {0.7, 2.0}};
  m.mixture = {0.3, 0.7};
  m.sigma = sigma;
  m.noise = NoiseConvention::PerCoordinate;
  return m;
}

double normal_pdf(double x, double var) { return std::exp(-0.5 * x * x / var) / std::sqrt(2.0 * std::numbers::pi * var); }

}  // namespace

TEST(SampleTokens, ZeroModelGivesZeros) {
  RngStream rng(500, 0);
  const auto m = single_gaussian(random_orthonormal(4, 2, rng), {0.0, 0.0}, 0.0);
  EXPECT_EQ(max_abs(sample_tokens(m, 10, rng).tokens), 0.0);
}

TEST(SampleTokens, NoiselessTokensLieOnTheirSubspace) {
  RngStream rng(501, 0);
  const auto m = GmmTokenModel::theorem_config(16, 4, 4, 0.0, rng);
  const TokenSample s = sample_tokens(m, 50, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    const Matrix& u = m.bases.bases[s.labels[i]];
    const Matrix z = s.tokens.col(i);
    EXPECT_LT(frobenius_norm(z - matmul(u, matmul_tn(u, z))), 1e-10);
  }
  EXPECT_EQ(s.tokens, s.clean);
}

TEST(SampleTokens, EmpiricalCovarianceMatchesModel) {
  RngStream rng(502, 0);
  const GmmTokenModel m = uneven_mixture(rng, 0.3);
  const std::size_t n = 100000;
  const TokenSample s = sample_tokens(m, n, rng);
  for (std::size_t k = 0; k < 2; ++k) {
    Matrix cov(3, 3);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (s.labels[i] != k) continue;
      ++count;
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) cov(a, b) += s.tokens(a, i) * s.tokens(b, i);
    }
    cov *= 1.0 / double(count);
    const Matrix expected = m.signal_covariance(k) + m.noise_variance() * Matrix::identity(3);
    EXPECT_NEAR(double(count) / n, m.mixture[k], 4.0 * std::sqrt(m.mixture[k] * (1 - m.mixture[k]) / n));
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        const double se = std::sqrt((expected(a, a) * expected(b, b) + expected(a, b) * expected(a, b)) / count);
        EXPECT_NEAR(cov(a, b), expected(a, b), 3.0 * se) << k << " " << a << " " << b;
      }
  }
}

TEST(SampleTokens, Deterministic) {
  RngStream a(503, 1), b(503, 1), setup(503, 0);
  const auto m = GmmTokenModel::theorem_config(8, 2, 4, 0.1, setup);
  EXPECT_EQ(sample_tokens(m, 20, a).tokens, sample_tokens(m, 20, b).tokens);
}

TEST(GmmDensity, StandardNormalAndSymmetry) {
  RngStream rng(504, 0);
  const auto m = single_gaussian(random_orthonormal(3, 1, rng), {0.0}, 1.0);
  const Matrix x{{0.3}, {-1.1}, {0.4}};
  EXPECT_NEAR(gmm_log_density(x, m), -1.5 * std::log(2 * std::numbers::pi) - 0.5 * squared_norm(x), 1e-12);
  const GmmTokenModel mix = uneven_mixture(rng, 0.2);
  EXPECT_DOUBLE_EQ(gmm_log_density(x, mix), gmm_log_density(-1.0 * x, mix));
}

TEST(GmmDensity, MatchesQuadratureOfConvolution) {
  // d = 1: two components on the same line with different spreads.
  GmmTokenModel m;
  m.bases = {{Matrix{{1.0}}, Matrix{{1.0}}}};
  m.coeff = CoeffConvention::Diagonal;
  m.coeff_var = {{0.5}, {2.0}};
  m.mixture = {0.4, 0.6};
  m.sigma = 0.3;
  m.noise = NoiseConvention::PerCoordinate;
  for (double x : {-2.0, -0.3, 0.0, 0.8, 3.1}) {
    // Simpson's rule for the integral of p_signal(a) N(x - a; 0, sigma^2).
    const double lo = -15.0, hi = 15.0;
    const int steps = 20000;
    const double h = (hi - lo) / steps;
    double acc = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double a = lo + i * h;
      const double signal = 0.4 * normal_pdf(a, 0.5) + 0.6 * normal_pdf(a, 2.0);
      const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * signal * normal_pdf(x - a, 0.09);
    }
    acc *= h / 3.0;
    EXPECT_NEAR(gmm_log_density(Matrix{{x}}, m), std::log(acc), 1e-6) << x;
  }
}

TEST(GmmScore, SingleGaussianAndOrigin) {
  RngStream rng(505, 0);
  const Matrix u = random_orthonormal(4, 2, rng);
  const auto m = single_gaussian(u, {1.3, 0.6}, 0.4);
  const Matrix x = random_matrix(4, 1, rng);
  const Matrix cov = m.signal_covariance(0) + 0.16 * Matrix::identity(4);
  const Matrix expected = -1.0 * cholesky_solve(cholesky_posdef(cov), x);
  EXPECT_LT(relative_error(gmm_score(x, m), expected), 1e-12);
  EXPECT_EQ(max_abs(gmm_score(Matrix(3, 1), uneven_mixture(rng, 0.2))), 0.0);
}

TEST(GmmScore, MatchesFiniteDifferencesOfLogDensity) {
  RngStream rng(506, 0);
  const GmmTokenModel m = uneven_mixture(rng, 0.25);
  const GmmDensity density(m);
  for (int t = 0; t < 10; ++t) {
    const Matrix x = random_matrix(3, 1, rng);
    Matrix fd(3, 1);
    for (std::size_t i = 0; i < 3; ++i) {
      Matrix xp = x, xm = x;
      xp[i] += 1e-5;
      xm[i] -= 1e-5;
      fd[i] = (density.log_density(xp) - density.log_density(xm)) / 2e-5;
    }
    EXPECT_LE(relative_error(density.score(x), fd), 1e-6);
  }
}

TEST(GmmScore, NormalizedFormAndPreconditionReport) {
  RngStream rng(507, 0);
  const auto theorem = GmmTokenModel::theorem_config(8, 2, 4, 0.1, rng);
  const GmmDensity td(theorem);
  EXPECT_TRUE(td.normalization_holds());
  const Matrix x = random_matrix(8, 1, rng);
  bool ok = false;
  EXPECT_LT(relative_error(td.score(x, ScoreForm::Normalized, &ok), td.score(x)), 1e-12);
  EXPECT_TRUE(ok);
  const GmmDensity uneven(uneven_mixture(rng, 0.2));
  EXPECT_FALSE(uneven.normalization_holds());
  uneven.score(random_matrix(3, 1, rng), ScoreForm::Normalized, &ok);
  EXPECT_FALSE(ok);
}

TEST(GmmScore, SteinIdentity) {
  RngStream rng(508, 0);
  const GmmTokenModel m = uneven_mixture(rng, 0.3);
  const GmmDensity density(m);
  const std::size_t n = 40000;
  const TokenSample s = sample_tokens(m, n, rng);
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix x = s.tokens.col(i);
    const double v = dot(density.score(x), x);
    mean += v;
    sq += v * v;
  }
  mean /= n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_NEAR(mean, -3.0, 4.0 * se);
}

TEST(Tweedie, SingleGaussianPosteriorMean) {
  RngStream rng(509, 0);
  const Matrix u = random_orthonormal(5, 2, rng);
  const auto m = single_gaussian(u, {0.9, 2.1}, 0.3);
  const Matrix sigma = m.signal_covariance(0);
  const Matrix x = random_matrix(5, 1, rng);
  const Matrix expected = matmul(sigma, cholesky_solve(cholesky_posdef(sigma + 0.09 * Matrix::identity(5)), x));
  EXPECT_LT(max_abs_diff(tweedie_denoise(x, m), expected), 1e-10);
}

TEST(Tweedie, FixesPointsOnTheSupportAsNoiseVanishes) {
  RngStream rng(510, 0);
  auto m = GmmTokenModel::theorem_config(8, 2, 4, 1e-6, rng);
  m.noise = NoiseConvention::PerCoordinate;
  const Matrix x = matmul(m.bases.bases[2], random_matrix(2, 1, rng));
  EXPECT_LT(max_abs_diff(tweedie_denoise(x, m), x), 1e-4);
}

TEST(Tweedie, DisplacementIsNoiseVarianceTimesScore) {
  RngStream rng(511, 0);
  const GmmTokenModel m = uneven_mixture(rng, 0.4);
  const GmmDensity density(m);
  const Matrix x = random_matrix(3, 1, rng);
  EXPECT_LT(max_abs_diff(density.tweedie(x) - x, m.noise_variance() * density.score(x)), 1e-14);
}

TEST(Tweedie, ApproximationImprovesAsNoiseVanishes) {
  double previous = std::numeric_limits<double>::infinity();
  for (double sigma : {0.3, 0.1, 0.03, 0.01}) {
    RngStream rng(512, 0);
    auto m = GmmTokenModel::theorem_config(16, 4, 4, sigma, rng);
    const GmmDensity density(m);
    const TokenSample s = sample_tokens(m, 200, rng);
    double worst = 0.0;
    for (std::size_t i = 0; i < 200; ++i) {
      const Matrix x = s.tokens.col(i);
      worst = std::max(worst, frobenius_norm(density.tweedie_approx(x) - density.tweedie(x)) / frobenius_norm(x));
    }
    EXPECT_LT(worst, previous) << sigma;
    previous = worst;
  }
}

TEST(NearestSubspace, Examples) {
  RngStream rng(513, 0);
  const auto u = SubspaceBasisSet::random_mutually_orthogonal(9, 3, 3, rng);
  const Matrix on = matmul(u.bases[0], random_matrix(3, 1, rng));
  const auto p = nearest_subspace_project(on, u);
  EXPECT_EQ(p.index, 0u);
  EXPECT_LT(max_abs_diff(p.point, on), 1e-14);
  const auto none = nearest_subspace_project(Matrix(9, 1), u);
  EXPECT_EQ(none.index, 0u);
  EXPECT_EQ(max_abs(none.point), 0.0);
}

TEST(NearestSubspace, BruteForceAndIdempotence) {
  RngStream rng(514, 0);
  const auto u = SubspaceBasisSet::random_orthonormal(7, 2, 4, rng);
  for (int t = 0; t < 50; ++t) {
    const Matrix x = random_matrix(7, 1, rng);
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (squared_norm(matmul_tn(u.bases[k], x)) > squared_norm(matmul_tn(u.bases[best], x))) best = k;
    const auto p = nearest_subspace_project(x, u);
    EXPECT_EQ(p.index, best);
    EXPECT_LT(max_abs_diff(p.point, matmul(u.bases[best], matmul_tn(u.bases[best], x))), 1e-14);
    const auto again = nearest_subspace_project(p.point, u);
    EXPECT_EQ(again.index, p.index);
    EXPECT_LT(max_abs_diff(again.point, p.point), 1e-14);
  }
}

TEST(TimeSchedule, GeometricGrid) {
  const auto t = time_schedule(2.0, 0.5, 4);
  ASSERT_EQ(t.size(), 5u);
  EXPECT_DOUBLE_EQ(t.back(), 2.0);
  EXPECT_NEAR(t.front(), 2.0 / 16.0, 1e-15);
  for (std::size_t i = 0; i + 1 < t.size(); ++i) EXPECT_NEAR(t[i + 1], 2.0 * t[i], 1e-14);
  EXPECT_THROW(time_schedule(-1.0, 0.5, 3), InvalidArgument);
}

TEST(TheoremEpsilon, Formula) {
  const double e = theorem_epsilon(0.01, 64, 32, 8);
  EXPECT_NEAR(e * e, 0.01 * 64 / (32.0 * 8.0 * std::sqrt(0.01 + std::sqrt(0.5))), 1e-15);
}

TEST(Experiment, NoiselessTokensKeepZeroResidual) {
  ExperimentConfig c;
  c.d = 16;
  c.n = 8;
  c.p = 4;
  c.K = 4;
  c.sigmas = {0.0};
  c.trials = 10;
  const auto report = compression_denoising_experiment(c);
  ASSERT_EQ(report.results.size(), 1u);
  for (double r : report.results[0].trial_residual_after) EXPECT_LT(r, 1e-12);
  EXPECT_FALSE(report.results[0].alignment.has_value());
}

TEST(Experiment, SmallRunDecreasesResidualAndIsDeterministic) {
  ExperimentConfig c;
  c.d = 16;
  c.n = 8;
  c.p = 4;
  c.K = 4;
  c.sigmas = {0.1, 0.01};
  c.trials = 20;
  c.seed = 3;
  const auto a = compression_denoising_experiment(c);
  const auto b = compression_denoising_experiment(c);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  for (const auto& r : a.results) {
    EXPECT_EQ(r.trial_residual_before.size(), 20u);
    EXPECT_GE(r.residual_decrease_fraction, 0.9);
  }
  const auto parsed = experiment_report_from_json(to_json(a));
  EXPECT_EQ(parsed.results, a.results);
  EXPECT_EQ(to_json(parsed).dump(), to_json(a).dump());
}

TEST(Experiment, RejectsInvalidShapes) {
  ExperimentConfig c;
  c.K = 7;  // K p != d
  EXPECT_THROW(compression_denoising_experiment(c), InvalidArgument);
  c = {};
  c.trials = 0;
  EXPECT_THROW(compression_denoising_experiment(c), InvalidArgument);
}
