#include "crate/losses.hpp"

#include <cmath>
#include <limits>

#include "crate/error.hpp"

namespace crate {

double cross_entropy(const Matrix& target, const Matrix& logits) {
  if (logits.cols() != 1 || !logits.same_shape(target)) throw ShapeMismatch("cross_entropy: expects matching C x 1 columns");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits.values()) m = std::max(m, v);
  double se = 0.0;
  for (double v : logits.values()) se += std::exp(v - m);
  const double lse = m + std::log(se);
  double loss = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (target[c] != 0.0) loss -= target[c] * (logits[c] - lse);
  return loss;
}

Matrix smoothed_target(std::size_t label, std::size_t classes, double smoothing) {
  if (label >= classes) throw InvalidArgument("smoothed_target: label out of range");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw InvalidArgument("smoothed_target: smoothing must be in [0, 1)");
  const double off = smoothing / double(classes);
  Matrix t(classes, 1, off);
  t[label] = 1.0 - smoothing + off;
  return t;
}

namespace {

Matrix keep_mask(std::size_t rows, std::size_t cols, std::span<const std::size_t> omega) {
  Matrix keep(rows, cols, 1.0);
  for (std::size_t j : omega) {
    if (j >= cols) throw InvalidArgument("mask_tokens: index out of range");
    for (std::size_t i = 0; i < rows; ++i) keep(i, j) = 0.0;
  }
  return keep;
}

Matrix indicator_row(std::size_t cols, std::span<const std::size_t> omega) {
  Matrix r(1, cols);
  for (std::size_t j : omega) r[j] = 1.0;
  return r;
}

}  // namespace

Matrix mask_tokens(const Matrix& x, std::span<const std::size_t> omega, const Matrix& mask_token) {
  if (mask_token.rows() != x.rows() || mask_token.cols() != 1) throw ShapeMismatch("mask_tokens: mask token must be D x 1");
  Matrix out = x;
  for (std::size_t j : omega) {
    if (j >= x.cols()) throw InvalidArgument("mask_tokens: index out of range");
    out.set_col(j, mask_token);
  }
  return out;
}

ad::Var mask_tokens(const ad::Var& x, std::span<const std::size_t> omega, const ad::Var& mask_token) {
  if (mask_token.rows() != x.rows() || mask_token.cols() != 1) throw ShapeMismatch("mask_tokens: mask token must be D x 1");
  ad::Tape& tape = *x.tape();
  const ad::Var kept = hadamard(x, tape.constant(keep_mask(x.rows(), x.cols(), omega)));
  return kept + matmul(mask_token, tape.constant(indicator_row(x.cols(), omega)));
}

namespace {

template <class T>
T reconstruction(const ModelSpec& spec, const ModelParams<T>& params, const T& x, std::span<const std::size_t> omega) {
  if (!params.mask_token) throw InvalidArgument("mae_loss: model has no mask token");
  const T masked = omega.empty() ? x : mask_tokens(x, omega, *params.mask_token);
  return decode(spec, params, encode(spec, params, masked));
}

}  // namespace

double mae_loss(const ModelSpec& spec, const ModelParams<Matrix>& params, const Matrix& x,
                std::span<const std::size_t> omega, MaeLossMode mode) {
  const Matrix r = reconstruction(spec, params, x, omega) - x;
  if (mode == MaeLossMode::FullImage) return squared_norm(r);
  double s = 0.0;
  for (std::size_t j : omega)
    for (std::size_t i = 0; i < r.rows(); ++i) s += r(i, j) * r(i, j);
  return s;
}

ad::Var mae_loss(const ModelSpec& spec, const ModelParams<ad::Var>& params, const Matrix& x,
                 std::span<const std::size_t> omega, MaeLossMode mode) {
  ad::Tape& tape = *params.emb.w_pre.tape();
  const ad::Var xv = tape.constant(x);
  const ad::Var r = reconstruction(spec, params, xv, omega) - xv;
  if (mode == MaeLossMode::FullImage) return squared_norm(r);
  Matrix sel(x.rows(), x.cols());
  for (std::size_t j : omega)
    for (std::size_t i = 0; i < x.rows(); ++i) sel(i, j) = 1.0;
  return squared_norm(hadamard(r, tape.constant(sel)));
}

double classification_loss(const ModelSpec& spec, const ModelParams<Matrix>& params, const Matrix& x,
                           std::size_t label, double smoothing) {
  return cross_entropy(smoothed_target(label, spec.classes, smoothing), classify(spec, params, x));
}

ad::Var classification_loss(const ModelSpec& spec, const ModelParams<ad::Var>& params, const Matrix& x,
                            std::size_t label, double smoothing) {
  ad::Tape& tape = *params.emb.w_pre.tape();
  return ad::cross_entropy(classify(spec, params, tape.constant(x)), smoothed_target(label, spec.classes, smoothing));
}

}  // namespace crate
