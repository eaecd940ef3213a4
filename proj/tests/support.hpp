#pragma once

#include <vector>

#include <Eigen/Dense>

#include "crate/matrix.hpp"
#include "crate/rng.hpp"

namespace crate::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, RngStream& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix m(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  return m;
}

// Singular values by Jacobi SVD, independent of the Cholesky-based paths.
inline std::vector<double> singular_values(const Matrix& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  const auto s = svd.singularValues();
  return std::vector<double>(s.data(), s.data() + s.size());
}

// sum_i log(1 + scale s_i^2)
inline double svd_logdet_gram(const Matrix& z, double scale) {
  double r = 0.0;
  for (double s : singular_values(z)) r += std::log1p(scale * s * s);
  return r;
}

inline double spectral_norm_svd(const Matrix& m) {
  const auto s = singular_values(m);
  return s.empty() ? 0.0 : s.front();
}

}  // namespace crate::testing
