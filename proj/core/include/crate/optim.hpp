#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "crate/matrix.hpp"

namespace crate {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;  // coupled (added to the gradient)
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

using OptimizerConfig = std::variant<SgdConfig, AdamConfig>;

struct OptimizerState {
  std::size_t step = 0;
  std::vector<Matrix> first;   // momentum buffer / Adam first moment
  std::vector<Matrix> second;  // Adam second moment
};

// In-place update of params from grads. The state is sized lazily on the
// first call.
void optimizer_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, OptimizerState& state,
                    const OptimizerConfig& config);

}  // namespace crate
