#pragma once

#include <vector>

#include "crate/matrix.hpp"

namespace crate {

class RngStream;

// Cholesky factor L (lower) with L L^T = A. Throws NotPositiveDefinite when a
// pivot falls to 1e-12 * trace(A)/dim or below.
Matrix cholesky_posdef(const Matrix& a);

// Same as cholesky_posdef, but retries once with 1e-10 * trace/dim added to
// the diagonal before giving up. Used for I + s G^T G style matrices where a
// failure can only come from roundoff.
Matrix cholesky_jittered(const Matrix& a);

// Solves (L L^T) X = B.
Matrix cholesky_solve(const Matrix& l, const Matrix& b);
double cholesky_logdet(const Matrix& l);

// I + scale * Z^T Z when Z has at most as many columns as rows, otherwise
// I + scale * Z Z^T. Both have the same log-determinant.
Matrix small_gram_plus_identity(const Matrix& z, double scale);

// log det(I + scale * Z^T Z), computed through the smaller Gram matrix.
double logdet_gram(const Matrix& z, double scale);

// Z (I + scale Z^T Z)^{-1}, through whichever Gram matrix is smaller
// (push-through identity).
Matrix gram_resolvent_apply(const Matrix& z, double scale);

// Column-wise softmax with per-column max subtraction. -inf entries are
// allowed (masked); a column with no finite entry throws DegenerateColumn.
Matrix softmax_columns(const Matrix& a);

enum class CausalConvention {
  Literal,     // keep (i, j) when i <= j
  Transposed,  // keep (i, j) when i >= j
};

Matrix causal_mask(const Matrix& a, CausalConvention conv = CausalConvention::Literal);

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // columns are eigenvectors
};

SymmetricEigen symmetric_eigen(const Matrix& a);

// A^{power} for symmetric PSD A, eigenvalues clamped below at `floor`.
Matrix psd_power(const Matrix& a, double power, double floor = 1e-12);

// Thin Q factor of A (d x p, d >= p), columns orthonormal, with the sign
// convention diag(R) >= 0.
Matrix orthonormalize(const Matrix& a);

// Haar-distributed d x p matrix with orthonormal columns.
Matrix random_orthonormal(std::size_t d, std::size_t p, RngStream& rng);

struct LayerNormCache {
  Matrix xhat;                  // standardized columns
  std::vector<double> inv_std;  // 1 / sqrt(var + eps) per column
};

// Per-column (per-token) standardization with biased variance, then
// gain/bias (both rows x 1).
Matrix layer_norm(const Matrix& z, const Matrix& gain, const Matrix& bias, double eps,
                  LayerNormCache* cache = nullptr);

// Largest singular value by power iteration on A^T A.
double spectral_norm(const Matrix& a, int iters = 200);

}  // namespace crate
