#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace crate {

// Dense row-major matrix of doubles. Columns are tokens throughout the
// library, so a d x n matrix holds n tokens of dimension d.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  Matrix col(std::size_t j) const;
  void set_col(std::size_t j, const Matrix& v);
  std::vector<double> col_vector(std::size_t j) const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a);
Matrix operator*(double s, const Matrix& a);
Matrix operator*(const Matrix& a, double s);

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T b without forming the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a b^T without forming the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix relu(const Matrix& a);
Matrix abs(const Matrix& a);
Matrix add_scalar(const Matrix& a, double s);
// Adds the column vector v (rows x 1) to every column of a.
Matrix add_colvec(const Matrix& a, const Matrix& v);

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end);
Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end);
Matrix select_cols(const Matrix& a, std::span<const std::size_t> idx);
Matrix concat_rows(std::span<const Matrix> parts);
Matrix concat_cols(std::span<const Matrix> parts);

double sum(const Matrix& a);
double dot(const Matrix& a, const Matrix& b);
double squared_norm(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
// ||a - b||_F / max(||b||_F, floor)
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-300);
Matrix row_sums(const Matrix& a);
bool all_finite(const Matrix& a);

}  // namespace crate
