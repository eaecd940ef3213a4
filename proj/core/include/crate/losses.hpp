#pragma once

#include <cstddef>
#include <span>

#include "crate/autodiff.hpp"
#include "crate/matrix.hpp"
#include "crate/model.hpp"

namespace crate {

// H(p, softmax(logits)) = -sum_c p_c log softmax(logits)_c, log-sum-exp
// stabilized. Both arguments are C x 1.
double cross_entropy(const Matrix& target, const Matrix& logits);

// One-hot target with label smoothing s: 1 - s + s/C on the label, s/C elsewhere.
Matrix smoothed_target(std::size_t label, std::size_t classes, double smoothing);

// Replaces the columns of x listed in omega by mask_token (D x 1).
Matrix mask_tokens(const Matrix& x, std::span<const std::size_t> omega, const Matrix& mask_token);
ad::Var mask_tokens(const ad::Var& x, std::span<const std::size_t> omega, const ad::Var& mask_token);

enum class MaeLossMode {
  FullImage,   // |g(f(Mask(X))) - X|_F^2 over all tokens
  MaskedOnly,  // restricted to the masked columns
};

// Squared reconstruction error of one sample through encoder then decoder.
double mae_loss(const ModelSpec& spec, const ModelParams<Matrix>& params, const Matrix& x,
                std::span<const std::size_t> omega, MaeLossMode mode = MaeLossMode::FullImage);

ad::Var mae_loss(const ModelSpec& spec, const ModelParams<ad::Var>& params, const Matrix& x,
                 std::span<const std::size_t> omega, MaeLossMode mode = MaeLossMode::FullImage);

// Classification loss of one sample.
double classification_loss(const ModelSpec& spec, const ModelParams<Matrix>& params, const Matrix& x,
                           std::size_t label, double smoothing);

ad::Var classification_loss(const ModelSpec& spec, const ModelParams<ad::Var>& params, const Matrix& x,
                            std::size_t label, double smoothing);

}  // namespace crate
