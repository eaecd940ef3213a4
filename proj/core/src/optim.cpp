#include "crate/optim.hpp"

#include <cmath>

#include "crate/error.hpp"

namespace crate {

namespace {

void ensure_state(std::vector<Matrix>& buf, const std::vector<Matrix>& like) {
  if (buf.size() == like.size()) return;
  buf.clear();
  for (const Matrix& m : like) buf.emplace_back(m.rows(), m.cols());
}

}  // namespace

void optimizer_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, OptimizerState& state,
                    const OptimizerConfig& config) {
  if (params.size() != grads.size()) throw ShapeMismatch("optimizer_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(params[i], grads[i], "optimizer_step");
  ++state.step;

  if (const auto* sgd = std::get_if<SgdConfig>(&config)) {
    const bool use_momentum = sgd->momentum != 0.0;
    if (use_momentum) ensure_state(state.first, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = params[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        double g = grads[i][k] + sgd->weight_decay * p[k];
        if (use_momentum) {
          double& v = state.first[i][k];
          v = state.step == 1 ? g : sgd->momentum * v + g;
          g = v;
        }
        p[k] -= sgd->lr * g;
      }
    }
    return;
  }

  const AdamConfig& adam = std::get<AdamConfig>(config);
  ensure_state(state.first, params);
  ensure_state(state.second, params);
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k];
      double& m = state.first[i][k];
      double& v = state.second[i][k];
      m = adam.beta1 * m + (1.0 - adam.beta1) * g;
      v = adam.beta2 * v + (1.0 - adam.beta2) * g * g;
      p[k] -= adam.lr * adam.weight_decay * p[k];
      p[k] -= adam.lr * (m / c1) / (std::sqrt(v / c2) + adam.eps);
    }
  }
}

}  // namespace crate
