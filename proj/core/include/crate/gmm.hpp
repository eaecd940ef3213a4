#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/matrix.hpp"
#include "crate/rate.hpp"

namespace crate {

class RngStream;

enum class NoiseConvention {
  PerCoordinate,  // noise covariance sigma^2 I
  Normalized,     // noise covariance sigma^2 / d I
};

enum class CoeffConvention {
  Diagonal,   // per-component diagonal Lambda_k
  Isotropic,  // Lambda_k = I / p
};

// Mixture of low-dimensional Gaussians on subspaces plus isotropic noise:
// z = U_s a + w, s ~ mixture, a ~ N(0, Lambda_s).
struct GmmTokenModel {
  SubspaceBasisSet bases;
  CoeffConvention coeff = CoeffConvention::Isotropic;
  std::vector<std::vector<double>> coeff_var;  // K x p, used with Diagonal
  std::vector<double> mixture;                 // K probabilities
  double sigma = 0.0;
  NoiseConvention noise = NoiseConvention::Normalized;

  std::size_t d() const { return bases.d(); }
  std::size_t p() const { return bases.p(); }
  std::size_t K() const { return bases.K(); }
  double noise_variance() const;
  std::vector<double> coefficient_variances(std::size_t k) const;
  Matrix signal_covariance(std::size_t k) const;  // U_k Lambda_k U_k^T
  void validate() const;

  // Mutually orthogonal bases, uniform mixture, isotropic coefficients,
  // normalized noise.
  static GmmTokenModel theorem_config(std::size_t d, std::size_t p, std::size_t K, double sigma, RngStream& rng);
};

struct TokenSample {
  Matrix tokens;  // d x n, noisy
  Matrix clean;   // d x n, U_s a
  std::vector<std::size_t> labels;
};

TokenSample sample_tokens(const GmmTokenModel& model, std::size_t n, RngStream& rng);

enum class ScoreForm {
  General,     // weights pi_k det(M_k) exp(-|M_k x|^2 / 2)
  Normalized,  // weights softmax(-|M_k x|^2 / 2); assumes pi_k det(M_k) equal
};

// Density, score and denoisers for a model with positive noise. Per-component
// matrices M_k = (Sigma_k + s^2 I)^{-1/2} are computed once, by
// eigendecomposition with eigenvalues clamped at 1e-12.
class GmmDensity {
 public:
  explicit GmmDensity(const GmmTokenModel& model);

  const GmmTokenModel& model() const { return model_; }
  double log_density(const Matrix& x) const;
  // For ScoreForm::Normalized, *normalization_ok (if given) reports whether
  // pi_k det(M_k) agree across components (relative 1e-9). A violation is a
  // warning, not an error.
  Matrix score(const Matrix& x, ScoreForm form = ScoreForm::General, bool* normalization_ok = nullptr) const;
  bool normalization_holds(double rel_tol = 1e-9) const;
  Matrix tweedie(const Matrix& x) const;
  // Softmax-of-projections approximation: sum_k softmax_k(|U_k^T x|^2 / 2s^2) U_k U_k^T x.
  Matrix tweedie_approx(const Matrix& x) const;

 private:
  std::vector<double> log_weights(const Matrix& x, bool include_normalizer) const;

  GmmTokenModel model_;
  double noise_var_ = 0.0;
  std::vector<Matrix> precision_;   // M_k M_k^T = (Sigma_k + s^2 I)^{-1}
  std::vector<Matrix> whitener_;    // M_k
  std::vector<double> log_det_m_;   // log det M_k
};

double gmm_log_density(const Matrix& x, const GmmTokenModel& model);
Matrix gmm_score(const Matrix& x, const GmmTokenModel& model, ScoreForm form = ScoreForm::General,
                 bool* normalization_ok = nullptr);
Matrix tweedie_denoise(const Matrix& x, const GmmTokenModel& model);
Matrix tweedie_denoise_approx(const Matrix& x, const GmmTokenModel& model);

struct SubspaceProjection {
  Matrix point;
  std::size_t index = 0;  // 0-based
};

// U_k U_k^T x for the k maximizing |U_k^T x|; ties go to the lowest index.
SubspaceProjection nearest_subspace_project(const Matrix& x, const SubspaceBasisSet& bases);

// Time grid for `layers` discretization steps: layers + 1 points
// t[0] = T / (1 + 2 kappa)^layers < ... < t[layers] = T, with
// t[l+1] = (1 + 2 kappa) t[l].
std::vector<double> time_schedule(double horizon, double kappa, std::size_t layers);

// Precision minimizing the theorem's residual bound:
// eps^2 = sigma d / (n K sqrt(sigma + sqrt(n / d))).
double theorem_epsilon(double sigma, std::size_t d, std::size_t n, std::size_t K);

enum class CompressionUpdate {
  GradientStep,  // Z - kappa grad R^c with kappa = 1/beta
  ConvexMssa,    // (1 - beta kappa) Z + beta kappa MSSA(Z) with kappa = 1/beta
};

struct ExperimentConfig {
  std::size_t d = 64;
  std::size_t n = 32;
  std::size_t p = 8;
  std::size_t K = 8;
  std::vector<double> sigmas = {0.01};
  std::size_t trials = 200;
  std::uint64_t seed = 0;
  std::optional<double> epsilon;  // default: theorem_epsilon for sigma > 0, else 0.5
  CompressionUpdate update = CompressionUpdate::GradientStep;
  NoiseConvention noise = NoiseConvention::Normalized;

  void validate() const;
};

struct Quantiles {
  double q10 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q90 = 0.0;
  friend bool operator==(const Quantiles&, const Quantiles&) = default;
};

Quantiles quantiles(std::vector<double> values);

struct SigmaResult {
  double sigma = 0.0;
  double epsilon = 0.0;
  std::size_t tokens = 0;
  double residual_decrease_fraction = 0.0;
  // Same measurement for the other update rule, for comparison.
  double alternate_residual_decrease_fraction = 0.0;
  std::optional<Quantiles> alignment;  // absent when sigma == 0
  std::vector<double> trial_residual_before;  // mean off-subspace residual per trial
  std::vector<double> trial_residual_after;
  std::vector<double> trial_alignment_median;
  friend bool operator==(const SigmaResult&, const SigmaResult&) = default;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<SigmaResult> results;  // one per sigma, config order

  // True when the median alignment strictly increases along decreasing sigma.
  bool alignment_increases_as_sigma_decreases() const;
};

// Samples noisy tokens from the theorem configuration, applies one
// compression update with kappa = 1/beta, and measures (a) how many tokens
// lose off-subspace residual |(I - U_s U_s^T) z| and (b) the cosine between
// the update's displacement and the Tweedie displacement E[z|x] - x.
ExperimentReport compression_denoising_experiment(const ExperimentConfig& config);

nlohmann::json to_json(const ExperimentReport& report);
ExperimentReport experiment_report_from_json(const nlohmann::json& j);

}  // namespace crate
