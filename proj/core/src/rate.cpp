#include "crate/rate.hpp"

#include <cmath>

#include "crate/error.hpp"
#include "crate/linalg.hpp"
#include "crate/rng.hpp"

namespace crate {

void RateParams::validate() const {
  if (!(epsilon > 0.0)) throw InvalidArgument("RateParams: epsilon must be positive");
  if (!(lambda >= 0.0)) throw InvalidArgument("RateParams: lambda must be nonnegative");
  if (!(kappa > 0.0)) throw InvalidArgument("RateParams: kappa must be positive");
  if (!(eta > 0.0)) throw InvalidArgument("RateParams: eta must be positive");
}

MembershipPartition MembershipPartition::from_labels(std::span<const std::size_t> labels, std::size_t num_classes) {
  MembershipPartition part;
  part.n = labels.size();
  part.classes.resize(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw InvalidArgument("MembershipPartition: label out of range");
    part.classes[labels[i]].push_back(i);
  }
  return part;
}

void MembershipPartition::validate() const {
  std::vector<int> seen(n, 0);
  for (const auto& cls : classes)
    for (std::size_t i : cls) {
      if (i >= n) throw InvalidArgument("MembershipPartition: index out of range");
      if (seen[i]++) throw InvalidArgument("MembershipPartition: classes overlap");
    }
  for (int s : seen)
    if (!s) throw InvalidArgument("MembershipPartition: classes do not cover all tokens");
}

SubspaceBasisSet SubspaceBasisSet::random_orthonormal(std::size_t d, std::size_t p, std::size_t K, RngStream& rng) {
  SubspaceBasisSet u;
  for (std::size_t k = 0; k < K; ++k) u.bases.push_back(crate::random_orthonormal(d, p, rng));
  return u;
}

SubspaceBasisSet SubspaceBasisSet::random_mutually_orthogonal(std::size_t d, std::size_t p, std::size_t K, RngStream& rng) {
  if (p * K > d) throw InvalidArgument("mutually orthogonal bases need Kp <= d");
  const Matrix q = crate::random_orthonormal(d, p * K, rng);
  SubspaceBasisSet u;
  for (std::size_t k = 0; k < K; ++k) u.bases.push_back(slice_cols(q, k * p, (k + 1) * p));
  return u;
}

SubspaceBasisSet SubspaceBasisSet::orthonormalized(std::vector<Matrix> raw) {
  SubspaceBasisSet u;
  for (const Matrix& m : raw) u.bases.push_back(orthonormalize(m));
  u.validate();
  return u;
}

SubspaceBasisSet SubspaceBasisSet::from_projection(const Matrix& qkv, std::size_t K) {
  if (K == 0 || qkv.rows() % K) throw ShapeMismatch("from_projection: rows not divisible by K");
  const std::size_t p = qkv.rows() / K;
  SubspaceBasisSet u;
  for (std::size_t k = 0; k < K; ++k) u.bases.push_back(transpose(slice_rows(qkv, k * p, (k + 1) * p)));
  return u;
}

Matrix SubspaceBasisSet::stacked() const { return concat_cols(bases); }

Matrix SubspaceBasisSet::projection() const { return transpose(stacked()); }

double SubspaceBasisSet::orthonormality_error() const {
  double err = 0.0;
  for (const Matrix& b : bases) err = std::max(err, max_abs_diff(matmul_tn(b, b), Matrix::identity(b.cols())));
  return err;
}

void SubspaceBasisSet::validate() const {
  for (const Matrix& b : bases)
    if (b.rows() != d() || b.cols() != p()) throw ShapeMismatch("SubspaceBasisSet: bases differ in shape");
}

namespace {

void check_bases(const Matrix& z, const SubspaceBasisSet& u) {
  u.validate();
  if (u.K() && u.d() != z.rows())
    throw ShapeMismatch("bases are " + std::to_string(u.d()) + "-dimensional, tokens are " + std::to_string(z.rows()));
}

}  // namespace

double coding_rate(const Matrix& z, const RateParams& params) {
  if (z.cols() == 0) throw InvalidArgument("coding_rate: no tokens");
  return 0.5 * logdet_gram(z, params.alpha(z.rows(), z.cols()));
}

double coding_rate_membership(const Matrix& z, const MembershipPartition& part, const RateParams& params) {
  if (part.n != z.cols()) throw ShapeMismatch("coding_rate_membership: partition size != token count");
  part.validate();
  double r = 0.0;
  for (std::size_t k = 0; k < part.classes.size(); ++k) {
    const auto& idx = part.classes[k];
    if (idx.empty()) throw EmptyClass("coding_rate_membership: class " + std::to_string(k) + " is empty");
    r += 0.5 * logdet_gram(select_cols(z, idx), params.gamma(z.rows(), idx.size()));
  }
  return r;
}

double coding_rate_subspaces(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  check_bases(z, u);
  const double beta = params.beta(u.p(), z.cols());
  double r = 0.0;
  for (const Matrix& b : u.bases) r += 0.5 * logdet_gram(matmul_tn(b, z), beta);
  return r;
}

double rate_reduction(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  return coding_rate(z, params) - coding_rate_subspaces(z, u, params);
}

double l0_norm(const Matrix& z) {
  double c = 0.0;
  for (double x : z.values()) c += x != 0.0 ? 1.0 : 0.0;
  return c;
}

double l1_norm(const Matrix& z) {
  double s = 0.0;
  for (double x : z.values()) s += std::fabs(x);
  return s;
}

double sparse_rate_reduction(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params, SparsityNorm norm) {
  const double penalty = norm == SparsityNorm::L0 ? l0_norm(z) : l1_norm(z);
  return rate_reduction(z, u, params) - params.lambda * penalty;
}

double energy(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  return -sparse_rate_reduction(z, u, params, SparsityNorm::L1);
}

Matrix grad_rc_exact(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  check_bases(z, u);
  const double beta = params.beta(u.p(), z.cols());
  Matrix g(z.rows(), z.cols());
  for (const Matrix& b : u.bases) {
    const Matrix y = matmul_tn(b, z);
    g += matmul(b, gram_resolvent_apply(y, beta));
  }
  g *= beta;
  return g;
}

Matrix grad_rc_neumann(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  check_bases(z, u);
  const double beta = params.beta(u.p(), z.cols());
  Matrix g(z.rows(), z.cols());
  for (const Matrix& b : u.bases) {
    const Matrix y = matmul_tn(b, z);
    // Y (I - beta Y^T Y) = Y - beta (Y Y^T) Y
    const Matrix corr = matmul(matmul_nt(y, y), y);
    g += matmul(b, y - beta * corr);
  }
  g *= beta;
  return g;
}

double neumann_expansion_parameter(const Matrix& z, const SubspaceBasisSet& u, const RateParams& params) {
  check_bases(z, u);
  const double beta = params.beta(u.p(), z.cols());
  double t = 0.0;
  for (const Matrix& b : u.bases) {
    const Matrix y = matmul_tn(b, z);
    const double s = spectral_norm(y);
    t = std::max(t, beta * s * s);
  }
  return t;
}

Matrix grad_r(const Matrix& z, const RateParams& params) {
  const double alpha = params.alpha(z.rows(), z.cols());
  return alpha * gram_resolvent_apply(z, alpha);
}

Matrix hessian_r_apply(const Matrix& z, const Matrix& delta, const RateParams& params) {
  require_same_shape(z, delta, "hessian_r_apply");
  const double alpha = params.alpha(z.rows(), z.cols());
  Matrix g = matmul_tn(z, z);
  g *= alpha;
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += 1.0;
  const Matrix l = cholesky_jittered(g);
  const Matrix delta_ginv = transpose(cholesky_solve(l, transpose(delta)));
  const Matrix z_ginv = transpose(cholesky_solve(l, transpose(z)));
  const Matrix m = matmul_tn(z, delta) + matmul_tn(delta, z);
  const Matrix ginv_m = cholesky_solve(l, m);  // G^{-1} M; M G^{-1} is its transpose
  return alpha * delta_ginv - (alpha * alpha) * matmul_nt(z_ginv, ginv_m);
}

SparsityMetrics sparsity_metrics(const Matrix& z) {
  SparsityMetrics m;
  const double total = double(z.size());
  if (total == 0.0) return m;
  m.l0_fraction = l0_norm(z) / total;
  m.l1 = l1_norm(z);
  for (std::size_t t = 0; t < kSparsityThresholds.size(); ++t) {
    double c = 0.0;
    for (double x : z.values()) c += std::fabs(x) < kSparsityThresholds[t] ? 1.0 : 0.0;
    m.below_threshold[t] = c / total;
  }
  return m;
}

}  // namespace crate
