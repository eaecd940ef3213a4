#include "crate/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "crate/error.hpp"
#include "crate/rng.hpp"

namespace crate {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

void require_square(const Matrix& a, const char* what) {
  if (a.rows() != a.cols()) throw ShapeMismatch(std::string(what) + ": matrix not square (" + a.shape_string() + ")");
}

Matrix cholesky_impl(const Matrix& a, double jitter) {
  const std::size_t n = a.rows();
  const double tol = n ? 1e-12 * std::fabs(trace(a)) / double(n) : 0.0;
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > tol))
      throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j) + " = " + std::to_string(diag) +
                                " below threshold " + std::to_string(tol));
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

}  // namespace

Matrix cholesky_posdef(const Matrix& a) {
  require_square(a, "cholesky_posdef");
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::fabs(a(i, j) - a(j, i)) > 1e-10 * scale)
        throw InvalidArgument("cholesky_posdef: matrix is not symmetric");
  return cholesky_impl(a, 0.0);
}

Matrix cholesky_jittered(const Matrix& a) {
  try {
    return cholesky_posdef(a);
  } catch (const NotPositiveDefinite&) {
    const double jitter = a.rows() ? 1e-10 * std::fabs(trace(a)) / double(a.rows()) : 0.0;
    return cholesky_impl(a, jitter);
  }
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows();
  if (b.rows() != n) throw ShapeMismatch("cholesky_solve: rhs has wrong row count");
  Matrix x = b;
  const std::size_t m = b.cols();
  // forward: L y = b
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = l(i, k);
      for (std::size_t c = 0; c < m; ++c) x(i, c) -= lik * x(k, c);
    }
    const double inv = 1.0 / l(i, i);
    for (std::size_t c = 0; c < m; ++c) x(i, c) *= inv;
  }
  // backward: L^T x = y
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = l(k, ii);
      for (std::size_t c = 0; c < m; ++c) x(ii, c) -= lki * x(k, c);
    }
    const double inv = 1.0 / l(ii, ii);
    for (std::size_t c = 0; c < m; ++c) x(ii, c) *= inv;
  }
  return x;
}

double cholesky_logdet(const Matrix& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

Matrix small_gram_plus_identity(const Matrix& z, double scale) {
  Matrix g = z.cols() <= z.rows() ? matmul_tn(z, z) : matmul_nt(z, z);
  g *= scale;
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += 1.0;
  return g;
}

double logdet_gram(const Matrix& z, double scale) {
  if (!(scale > 0.0)) throw InvalidArgument("logdet_gram: scale must be positive");
  if (z.rows() == 0 || z.cols() == 0) return 0.0;
  return cholesky_logdet(cholesky_jittered(small_gram_plus_identity(z, scale)));
}

Matrix gram_resolvent_apply(const Matrix& z, double scale) {
  if (z.rows() == 0 || z.cols() == 0) return z;
  const Matrix l = cholesky_jittered(small_gram_plus_identity(z, scale));
  if (z.cols() <= z.rows()) {
    // Z G^{-1} = (G^{-1} Z^T)^T, G symmetric.
    return transpose(cholesky_solve(l, transpose(z)));
  }
  // Z (I + s Z^T Z)^{-1} = (I + s Z Z^T)^{-1} Z
  return cholesky_solve(l, z);
}

Matrix softmax_columns(const Matrix& a) {
  Matrix s(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.rows(); ++i) m = std::max(m, a(i, j));
    if (!std::isfinite(m)) throw DegenerateColumn("softmax_columns: column " + std::to_string(j) + " has no finite entry");
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double e = std::exp(a(i, j) - m);
      s(i, j) = e;
      total += e;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) s(i, j) /= total;
  }
  return s;
}

Matrix causal_mask(const Matrix& a, CausalConvention conv) {
  require_square(a, "causal_mask");
  Matrix r = a;
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const bool keep = conv == CausalConvention::Literal ? i <= j : i >= j;
      if (!keep) r(i, j) = ninf;
    }
  return r;
}

SymmetricEigen symmetric_eigen(const Matrix& a) {
  require_square(a, "symmetric_eigen");
  const std::size_t n = a.rows();
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = 0.5 * (a(i, j) + a(j, i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("symmetric_eigen: solver did not converge");
  SymmetricEigen out;
  out.values.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
  out.vectors = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.vectors(i, j) = es.eigenvectors()(i, j);
  return out;
}

Matrix psd_power(const Matrix& a, double power, double floor) {
  const SymmetricEigen es = symmetric_eigen(a);
  const std::size_t n = a.rows();
  Matrix scaled = es.vectors;
  for (std::size_t j = 0; j < n; ++j) {
    const double w = std::pow(std::max(es.values[j], floor), power);
    for (std::size_t i = 0; i < n; ++i) scaled(i, j) *= w;
  }
  return matmul_nt(scaled, es.vectors);
}

Matrix orthonormalize(const Matrix& a) {
  if (a.cols() > a.rows()) throw ShapeMismatch("orthonormalize: more columns than rows");
  const std::size_t d = a.rows(), p = a.cols();
  Eigen::MatrixXd m(d, p);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < p; ++j) m(i, j) = a(i, j);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(d), Eigen::Index(p));
  const Eigen::MatrixXd r = qr.matrixQR().topRows(Eigen::Index(p)).triangularView<Eigen::Upper>();
  Matrix out(d, p);
  for (std::size_t j = 0; j < p; ++j) {
    const double sign = r(Eigen::Index(j), Eigen::Index(j)) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) out(i, j) = sign * q(Eigen::Index(i), Eigen::Index(j));
  }
  return out;
}

Matrix random_orthonormal(std::size_t d, std::size_t p, RngStream& rng) {
  Matrix g(d, p);
  for (double& x : g.values()) x = rng.normal();
  return orthonormalize(g);
}

Matrix layer_norm(const Matrix& z, const Matrix& gain, const Matrix& bias, double eps, LayerNormCache* cache) {
  const std::size_t d = z.rows(), n = z.cols();
  if (gain.rows() != d || gain.cols() != 1 || bias.rows() != d || bias.cols() != 1)
    throw ShapeMismatch("layer_norm: affine parameters must be " + std::to_string(d) + "x1");
  if (!(eps > 0.0)) throw InvalidArgument("layer_norm: eps must be positive");
  LayerNormCache local;
  LayerNormCache& c = cache ? *cache : local;
  c.xhat = Matrix(d, n);
  c.inv_std.assign(n, 0.0);
  Matrix y(d, n);
  for (std::size_t j = 0; j < n; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += z(i, j);
    mu /= double(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (z(i, j) - mu) * (z(i, j) - mu);
    var /= double(d);
    c.inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      c.xhat(i, j) = (z(i, j) - mu) * c.inv_std[j];
      y(i, j) = gain[i] * c.xhat(i, j) + bias[i];
    }
  }
  return y;
}

double spectral_norm(const Matrix& a, int iters) {
  if (a.empty()) return 0.0;
  Matrix v(a.cols(), 1, 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.01 * double(i);
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    Matrix w = matmul_tn(a, matmul(a, v));
    const double nrm = frobenius_norm(w);
    if (nrm == 0.0) return 0.0;
    v = (1.0 / nrm) * w;
    sigma = std::sqrt(nrm);
  }
  return sigma;
}

}  // namespace crate
