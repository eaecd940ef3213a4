#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/dataset.hpp"
#include "crate/matrix.hpp"
#include "crate/model.hpp"

namespace crate {

// ---- layer-wise compression and sparsity ------------------------------------

struct LayerMetricsRow {
  std::size_t layer_index = 0;       // 0-based encoder layer
  double rc_after_attention = 0.0;   // R^c of the compression-step output under the layer's bases
  double sparsity_l0_fraction = 0.0; // nonzero fraction of the ISTA output
  double l1_norm = 0.0;              // l1 norm of the ISTA output

  friend bool operator==(const LayerMetricsRow&, const LayerMetricsRow&) = default;
};

inline constexpr std::size_t kDefaultMetricSamples = 1000;

// Per-sample metrics averaged over the first min(samples, dataset size)
// samples, one row per encoder layer.
std::vector<LayerMetricsRow> layer_metrics(const Model& model, const Dataset& data,
                                           std::size_t samples = kDefaultMetricSamples);

std::string layer_metrics_csv(const std::vector<LayerMetricsRow>& rows);
std::vector<LayerMetricsRow> parse_layer_metrics_csv(const std::string& text);

// ---- attention maps ---------------------------------------------------------

struct AttentionMapRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> values;  // one weight per patch token
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  friend bool operator==(const AttentionMapRecord&, const AttentionMapRecord&) = default;
};

// Softmax over patch tokens of scale * <P z_i, P z_cls>, where column 0 of z
// is the class token and P is one head's projection (p x d).
std::vector<double> class_token_attention(const Matrix& z, const Matrix& proj, double scale);

// Class-token attention of one head at the input of one encoder layer (after
// its first normalization). Requires a model with a class token.
AttentionMapRecord attention_map(const Model& model, const Matrix& x, std::size_t layer, std::size_t head);

nlohmann::json to_json(const AttentionMapRecord& r);
AttentionMapRecord attention_map_from_json(const nlohmann::json& j);

// ---- subspace coherence -----------------------------------------------------

struct CoherenceRecord {
  std::size_t layer = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  Matrix gram;  // (pK) x (pK)

  friend bool operator==(const CoherenceRecord&, const CoherenceRecord&) = default;
};

// Gram matrix of the rows of a (pK) x d projection after normalizing each row
// to unit length. Zero rows stay zero.
Matrix coherence_matrix(const Matrix& projection);
CoherenceRecord coherence(const Model& model, std::size_t layer);

nlohmann::json to_json(const CoherenceRecord& r);
CoherenceRecord coherence_from_json(const nlohmann::json& j);

// ---- gradient checks --------------------------------------------------------

struct GradCheck {
  std::string name;
  double tolerance = 0.0;
  // Returns the worst error over the check's instances.
  std::function<double(std::uint64_t seed)> run;
};

struct GradCheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  friend bool operator==(const GradCheckResult&, const GradCheckResult&) = default;
};

class GradCheckRegistry {
 public:
  void add(GradCheck check);
  const std::vector<GradCheck>& checks() const { return checks_; }
  bool empty() const { return checks_.empty(); }

  // Throws InvalidArgument when nothing is registered.
  std::vector<GradCheckResult> run_all(std::uint64_t seed) const;

  // Rate-gradient identities, Hessian symmetry and bound, and an end-to-end
  // encoder gradient check.
  static GradCheckRegistry defaults();

 private:
  std::vector<GradCheck> checks_;
};

bool all_passed(const std::vector<GradCheckResult>& results);
nlohmann::json to_json(const std::vector<GradCheckResult>& results);
std::vector<GradCheckResult> gradcheck_results_from_json(const nlohmann::json& j);

}  // namespace crate
