#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "crate/matrix.hpp"

namespace crate {

class RngStream;

// Quantization precision and step sizes. The scales alpha, beta, gamma_k
// depend on (d, n, p, n_k) and are computed at each call site.
struct RateParams {
  double epsilon = 0.5;
  double lambda = 0.1;
  double kappa = 1.0;
  double eta = 0.1;

  double alpha(std::size_t d, std::size_t n) const { return double(d) / (double(n) * epsilon * epsilon); }
  double beta(std::size_t p, std::size_t n) const { return double(p) / (double(n) * epsilon * epsilon); }
  double gamma(std::size_t d, std::size_t n_k) const { return double(d) / (double(n_k) * epsilon * epsilon); }
  void validate() const;
};

// Disjoint cover of the n token indices by K classes.
struct MembershipPartition {
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> classes;

  static MembershipPartition from_labels(std::span<const std::size_t> labels, std::size_t num_classes);
  std::size_t count(std::size_t k) const { return classes[k].size(); }
  void validate() const;
};

// K bases U_k, each d x p.
struct SubspaceBasisSet {
  std::vector<Matrix> bases;

  std::size_t K() const { return bases.size(); }
  std::size_t d() const { return bases.empty() ? 0 : bases.front().rows(); }
  std::size_t p() const { return bases.empty() ? 0 : bases.front().cols(); }

  // K independent Haar-random orthonormal d x p bases.
  static SubspaceBasisSet random_orthonormal(std::size_t d, std::size_t p, std::size_t K, RngStream& rng);
  // K mutually orthogonal bases carved from one random d x d rotation (Kp <= d).
  static SubspaceBasisSet random_mutually_orthogonal(std::size_t d, std::size_t p, std::size_t K, RngStream& rng);
  // Each basis orthonormalized independently.
  static SubspaceBasisSet orthonormalized(std::vector<Matrix> raw);
  // From a (pK) x d projection whose row blocks are U_k^T.
  static SubspaceBasisSet from_projection(const Matrix& qkv, std::size_t K);

  Matrix stacked() const;     // d x (pK): [U_1, ..., U_K]
  Matrix projection() const;  // (pK) x d: rows stack U_k^T
  double orthonormality_error() const;  // max_k max |U_k^T U_k - I|
  void validate() const;
};

double coding_rate(const Matrix& z, const RateParams& params);
double coding_rate_membership(const Matrix& z, const MembershipPartition& part, const RateParams& params);
double coding_rate_subspaces(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);
double rate_reduction(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);

enum class SparsityNorm { L0, L1 };

double l0_norm(const Matrix& z);  // exact nonzero count
double l1_norm(const Matrix& z);
double sparse_rate_reduction(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params, SparsityNorm norm);
// Unnormalized energy: -(R - R^c - lambda ||Z||_1).
double energy(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);

Matrix grad_rc_exact(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);
Matrix grad_rc_neumann(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);
// max_k || beta (U_k^T Z)^T (U_k^T Z) ||_2, the expansion parameter of the
// Neumann approximation.
double neumann_expansion_parameter(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params);

Matrix grad_r(const Matrix& z, const RateParams& params);
Matrix hessian_r_apply(const Matrix& z, const Matrix& delta, const RateParams& params);

inline constexpr std::array<double, 3> kSparsityThresholds = {1.0, 0.5, 0.1};

struct SparsityMetrics {
  double l0_fraction = 0.0;
  double l1 = 0.0;
  std::array<double, 3> below_threshold{};  // fraction of |z| < tau for tau in kSparsityThresholds
};

SparsityMetrics sparsity_metrics(const Matrix& z);

}  // namespace crate
