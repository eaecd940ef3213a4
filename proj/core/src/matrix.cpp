#include "crate/matrix.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "crate/error.hpp"

namespace crate {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return ConstMap(m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }
MutMap view(Matrix& m) { return MutMap(m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw ShapeMismatch("matrix data length " + std::to_string(data_.size()) + " != " +
                        std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeMismatch("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

Matrix Matrix::col(std::size_t j) const {
  Matrix c(rows_, 1);
  for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
  return c;
}

void Matrix::set_col(std::size_t j, const Matrix& v) {
  if (v.size() != rows_) throw ShapeMismatch("set_col: length mismatch");
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
}

std::vector<double> Matrix::col_vector(std::size_t j) const {
  std::vector<double> c(rows_);
  for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
  return c;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "+=");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "-=");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other.data_[k];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeMismatch(std::string(what) + ": " + a.shape_string() + " vs " + b.shape_string());
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix r = a;
  r += b;
  return r;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  Matrix r = a;
  r -= b;
  return r;
}

Matrix operator-(const Matrix& a) { return -1.0 * a; }

Matrix operator*(double s, const Matrix& a) {
  Matrix r = a;
  r *= s;
  return r;
}

Matrix operator*(const Matrix& a, double s) { return s * a; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul: " + a.shape_string() + " * " + b.shape_string());
  Matrix r(a.rows(), b.cols());
  if (a.cols() == 0) return r;
  view(r).noalias() = view(a) * view(b);
  return r;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw ShapeMismatch("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  Matrix r(a.cols(), b.cols());
  if (a.rows() == 0) return r;
  view(r).noalias() = view(a).transpose() * view(b);
  return r;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeMismatch("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
  Matrix r(a.rows(), b.rows());
  if (a.cols() == 0) return r;
  view(r).noalias() = view(a) * view(b).transpose();
  return r;
}

Matrix transpose(const Matrix& a) {
  Matrix r(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) r(j, i) = a(i, j);
  return r;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix r = a;
  for (std::size_t k = 0; k < r.size(); ++k) r[k] *= b[k];
  return r;
}

Matrix relu(const Matrix& a) {
  Matrix r = a;
  for (double& x : r.values()) x = x > 0.0 ? x : 0.0;
  return r;
}

Matrix abs(const Matrix& a) {
  Matrix r = a;
  for (double& x : r.values()) x = std::fabs(x);
  return r;
}

Matrix add_scalar(const Matrix& a, double s) {
  Matrix r = a;
  for (double& x : r.values()) x += s;
  return r;
}

Matrix add_colvec(const Matrix& a, const Matrix& v) {
  if (v.rows() != a.rows() || v.cols() != 1)
    throw ShapeMismatch("add_colvec: " + a.shape_string() + " + " + v.shape_string());
  Matrix r = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) r(i, j) += v[i];
  return r;
}

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeMismatch("slice_rows out of range");
  Matrix r(end - begin, a.cols());
  std::copy(a.data() + begin * a.cols(), a.data() + end * a.cols(), r.data());
  return r;
}

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ShapeMismatch("slice_cols out of range");
  Matrix r(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) r(i, j - begin) = a(i, j);
  return r;
}

Matrix select_cols(const Matrix& a, std::span<const std::size_t> idx) {
  Matrix r(a.rows(), idx.size());
  for (std::size_t c = 0; c < idx.size(); ++c) {
    if (idx[c] >= a.cols()) throw ShapeMismatch("select_cols index out of range");
    for (std::size_t i = 0; i < a.rows(); ++i) r(i, c) = a(i, idx[c]);
  }
  return r;
}

Matrix concat_rows(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t rows = 0;
  const std::size_t cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix r(rows, cols);
  double* out = r.data();
  for (const auto& p : parts) out = std::copy(p.data(), p.data() + p.size(), out);
  return r;
}

Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  const std::size_t rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix r(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) r(i, off + j) = p(i, j);
    off += p.cols();
  }
  return r;
}

double sum(const Matrix& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return s;
}

double dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double squared_norm(const Matrix& a) { return dot(a, a); }

double frobenius_norm(const Matrix& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double x : a.values()) m = std::max(m, std::fabs(x));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return max_abs(a - b); }

double relative_error(const Matrix& a, const Matrix& b, double floor) {
  return frobenius_norm(a - b) / std::max(frobenius_norm(b), floor);
}

Matrix row_sums(const Matrix& a) {
  Matrix r(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) r[i] += a(i, j);
  return r;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](double x) { return std::isfinite(x); });
}

}  // namespace crate
