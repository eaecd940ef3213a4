#include "crate/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "crate/autodiff.hpp"
#include "crate/error.hpp"
#include "crate/linalg.hpp"
#include "crate/losses.hpp"
#include "crate/parallel.hpp"
#include "crate/rate.hpp"
#include "crate/rng.hpp"

namespace crate {

namespace {

constexpr const char* kMetricsHeader = "layer_index,rc_after_attention,sparsity_l0_fraction,l1_norm";

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_real(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("metrics csv: bad number '" + s + "'");
  }
  if (used != s.size()) throw FormatError("metrics csv: bad number '" + s + "'");
  return v;
}

void check_layer(const ModelSpec& spec, std::size_t layer) {
  if (layer >= spec.layers)
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range (model has " +
                          std::to_string(spec.layers) + " encoder layers)");
}

}  // namespace

std::vector<LayerMetricsRow> layer_metrics(const Model& model, const Dataset& data, std::size_t samples) {
  const ModelSpec& spec = model.spec();
  data.validate();
  if (data.patch_dim != spec.patch_dim || data.tokens != spec.tokens)
    throw ShapeMismatch("dataset samples are " + std::to_string(data.patch_dim) + "x" + std::to_string(data.tokens) +
                        ", model expects " + std::to_string(spec.patch_dim) + "x" + std::to_string(spec.tokens));
  const std::size_t b = std::min(samples, data.size());
  if (b == 0) throw InvalidArgument("layer_metrics: no samples");

  const ModelParams<Matrix> params = bind(model);
  const RateParams rate = spec.rate();
  std::vector<SubspaceBasisSet> bases;
  for (const auto& layer : params.encoder) bases.push_back(SubspaceBasisSet::from_projection(layer.attn.qkv, spec.heads));

  // per_sample[s][l] = {rc, l0 fraction, l1}
  std::vector<std::vector<std::array<double, 3>>> per_sample(b);
  parallel_for(b, [&](std::size_t s) {
    std::vector<EncoderTrace<Matrix>> trace;
    encode(spec, params, data.samples[s], &trace);
    per_sample[s].resize(trace.size());
    for (std::size_t l = 0; l < trace.size(); ++l) {
      const SparsityMetrics sm = sparsity_metrics(trace[l].out);
      per_sample[s][l] = {coding_rate_subspaces(trace[l].half, bases[l], rate), sm.l0_fraction, sm.l1};
    }
  });

  std::vector<LayerMetricsRow> rows(spec.layers);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    rows[l].layer_index = l;
    for (std::size_t s = 0; s < b; ++s) {
      rows[l].rc_after_attention += per_sample[s][l][0];
      rows[l].sparsity_l0_fraction += per_sample[s][l][1];
      rows[l].l1_norm += per_sample[s][l][2];
    }
    rows[l].rc_after_attention /= double(b);
    rows[l].sparsity_l0_fraction /= double(b);
    rows[l].l1_norm /= double(b);
  }
  return rows;
}

std::string layer_metrics_csv(const std::vector<LayerMetricsRow>& rows) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.layer_index) + ',' + format_real(r.rc_after_attention) + ',' +
           format_real(r.sparsity_l0_fraction) + ',' + format_real(r.l1_norm) + '\n';
  }
  return out;
}

std::vector<LayerMetricsRow> parse_layer_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics csv: missing or wrong header");
  std::vector<LayerMetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    if (fields.size() != 4) throw FormatError("metrics csv: expected 4 fields, got " + std::to_string(fields.size()));
    LayerMetricsRow r;
    const double idx = parse_real(fields[0]);
    if (idx < 0 || idx != std::floor(idx)) throw FormatError("metrics csv: bad layer index '" + fields[0] + "'");
    r.layer_index = std::size_t(idx);
    r.rc_after_attention = parse_real(fields[1]);
    r.sparsity_l0_fraction = parse_real(fields[2]);
    r.l1_norm = parse_real(fields[3]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<double> class_token_attention(const Matrix& z, const Matrix& proj, double scale) {
  if (z.cols() < 2) throw InvalidArgument("class_token_attention: need a class token and at least one patch");
  if (proj.cols() != z.rows())
    throw ShapeMismatch("class_token_attention: projection " + proj.shape_string() + " vs tokens " + z.shape_string());
  const Matrix y = matmul(proj, z);
  const std::size_t n = z.cols() - 1;
  Matrix scores(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < y.rows(); ++r) s += y(r, i + 1) * y(r, 0);
    scores[i] = scale * s;
  }
  const Matrix w = softmax_columns(scores);
  return std::vector<double>(w.values().begin(), w.values().end());
}

AttentionMapRecord attention_map(const Model& model, const Matrix& x, std::size_t layer, std::size_t head) {
  const ModelSpec& spec = model.spec();
  check_layer(spec, layer);
  if (head >= spec.heads)
    throw InvalidArgument("head " + std::to_string(head) + " out of range (layer has " + std::to_string(spec.heads) +
                          " heads)");
  if (!spec.class_token || spec.autoencoder()) throw InvalidArgument("attention maps need a model with a class token");
  if (x.rows() != spec.patch_dim || x.cols() != spec.tokens)
    throw ShapeMismatch("sample is " + x.shape_string() + ", model expects " + std::to_string(spec.patch_dim) + "x" +
                        std::to_string(spec.tokens));

  const ModelParams<Matrix> params = bind(model);
  Matrix z;
  if (layer == 0) {
    z = preprocess(x, params.emb);
  } else {
    std::vector<EncoderTrace<Matrix>> trace;
    ModelSpec truncated = spec;
    truncated.layers = layer;
    ModelParams<Matrix> prefix = params;
    prefix.encoder.resize(layer);
    encode(truncated, prefix, x, &trace);
    z = trace.back().out;
  }
  z = apply_layer_norm(z, params.encoder[layer].ln1);
  const Matrix proj = slice_rows(params.encoder[layer].attn.qkv, head * spec.head_dim, (head + 1) * spec.head_dim);

  AttentionMapRecord r;
  r.layer = layer;
  r.head = head;
  r.values = class_token_attention(z, proj, spec.softmax_temperature());
  const auto side = std::size_t(std::llround(std::sqrt(double(spec.tokens))));
  if (side * side == spec.tokens) {
    r.grid_rows = r.grid_cols = side;
  } else {
    r.grid_rows = spec.tokens;
    r.grid_cols = 1;
  }
  return r;
}

nlohmann::json to_json(const AttentionMapRecord& r) {
  return {{"layer", r.layer}, {"head", r.head}, {"grid_rows", r.grid_rows}, {"grid_cols", r.grid_cols},
          {"values", r.values}};
}

AttentionMapRecord attention_map_from_json(const nlohmann::json& j) {
  try {
    AttentionMapRecord r;
    r.layer = j.at("layer").get<std::size_t>();
    r.head = j.at("head").get<std::size_t>();
    r.grid_rows = j.at("grid_rows").get<std::size_t>();
    r.grid_cols = j.at("grid_cols").get<std::size_t>();
    r.values = j.at("values").get<std::vector<double>>();
    if (r.grid_rows * r.grid_cols != r.values.size()) throw FormatError("attention map: grid does not match values");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("attention map: ") + e.what());
  }
}

Matrix coherence_matrix(const Matrix& projection) {
  Matrix normalized = projection;
  for (std::size_t i = 0; i < normalized.rows(); ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < normalized.cols(); ++j) norm += normalized(i, j) * normalized(i, j);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    for (std::size_t j = 0; j < normalized.cols(); ++j) normalized(i, j) /= norm;
  }
  return matmul_nt(normalized, normalized);
}

CoherenceRecord coherence(const Model& model, std::size_t layer) {
  const ModelSpec& spec = model.spec();
  check_layer(spec, layer);
  return {layer, spec.heads, spec.head_dim,
          coherence_matrix(model.param("encoder." + std::to_string(layer) + ".attn.qkv"))};
}

nlohmann::json to_json(const CoherenceRecord& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.gram.rows(); ++i) {
    std::vector<double> row(r.gram.cols());
    for (std::size_t j = 0; j < r.gram.cols(); ++j) row[j] = r.gram(i, j);
    rows.push_back(row);
  }
  return {{"layer", r.layer}, {"heads", r.heads}, {"head_dim", r.head_dim}, {"matrix", rows}};
}

CoherenceRecord coherence_from_json(const nlohmann::json& j) {
  try {
    CoherenceRecord r;
    r.layer = j.at("layer").get<std::size_t>();
    r.heads = j.at("heads").get<std::size_t>();
    r.head_dim = j.at("head_dim").get<std::size_t>();
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    const std::size_t m = r.heads * r.head_dim;
    if (rows.size() != m) throw FormatError("coherence: matrix must be " + std::to_string(m) + " square");
    r.gram = Matrix(m, m);
    for (std::size_t i = 0; i < m; ++i) {
      if (rows[i].size() != m) throw FormatError("coherence: ragged matrix");
      for (std::size_t c = 0; c < m; ++c) r.gram(i, c) = rows[i][c];
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("coherence: ") + e.what());
  }
}

// ---- gradient checks --------------------------------------------------------

void GradCheckRegistry::add(GradCheck check) {
  if (!check.run) throw InvalidArgument("gradcheck '" + check.name + "' has no body");
  checks_.push_back(std::move(check));
}

std::vector<GradCheckResult> GradCheckRegistry::run_all(std::uint64_t seed) const {
  if (checks_.empty()) throw InvalidArgument("gradcheck: no checks registered");
  std::vector<GradCheckResult> out;
  for (std::size_t i = 0; i < checks_.size(); ++i) {
    const GradCheck& c = checks_[i];
    const double err = c.run(seed);
    out.push_back({c.name, err, c.tolerance, std::isfinite(err) && err <= c.tolerance});
  }
  return out;
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

struct RateInstance {
  Matrix z;
  SubspaceBasisSet u;
  RateParams rate;
};

// Small random instance: d <= 16, n <= 8, orthonormal bases.
RateInstance rate_instance(RngStream& rng) {
  const std::size_t d = 4 + rng.index(13);
  const std::size_t n = 2 + rng.index(7);
  const std::size_t p = 1 + rng.index(std::min<std::size_t>(d, 4));
  const std::size_t k = 1 + rng.index(3);
  RateInstance inst{random_matrix(d, n, rng), SubspaceBasisSet::random_orthonormal(d, p, k, rng), {}};
  inst.rate.epsilon = 0.5 + rng.uniform();
  return inst;
}

ad::Var rc_expression(const ad::Var& z, const SubspaceBasisSet& u, const RateParams& rate) {
  const double beta = rate.beta(u.p(), z.value().cols());
  ad::Tape& tape = *z.tape();
  ad::Var total;
  for (std::size_t k = 0; k < u.K(); ++k) {
    const ad::Var y = ad::matmul(tape.constant(transpose(u.bases[k])), z);
    const ad::Var term = 0.5 * ad::logdet_gram(y, beta);
    total = k == 0 ? term : total + term;
  }
  return total;
}

constexpr std::size_t kRateInstances = 20;

double rc_closed_form_vs_autodiff(std::uint64_t seed) {
  RngStream rng(seed, 0x6C01);
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const Matrix at[] = {inst.z};
    const auto vg = ad::value_and_grad(
        [&](ad::Tape&, std::span<const ad::Var> v) { return rc_expression(v[0], inst.u, inst.rate); }, at);
    worst = std::max(worst, relative_error(grad_rc_exact(inst.z, inst.u, inst.rate), vg.grads[0]));
  }
  return worst;
}

double rc_closed_form_vs_finite_difference(std::uint64_t seed) {
  RngStream rng(seed, 0x6C02);
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const Matrix at[] = {inst.z};
    const auto fd = ad::finite_difference_grad(
        [&](ad::Tape&, std::span<const ad::Var> v) { return rc_expression(v[0], inst.u, inst.rate); }, at);
    worst = std::max(worst, relative_error(grad_rc_exact(inst.z, inst.u, inst.rate), fd[0]));
  }
  return worst;
}

ad::Var r_expression(const ad::Var& z, const RateParams& rate) {
  return 0.5 * ad::logdet_gram(z, rate.alpha(z.value().rows(), z.value().cols()));
}

double r_gradient_vs_finite_difference(std::uint64_t seed) {
  RngStream rng(seed, 0x6C03);
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const Matrix at[] = {inst.z};
    const auto fd = ad::finite_difference_grad(
        [&](ad::Tape&, std::span<const ad::Var> v) { return r_expression(v[0], inst.rate); }, at);
    worst = std::max(worst, relative_error(grad_r(inst.z, inst.rate), fd[0]));
  }
  return worst;
}

double hessian_vs_gradient_difference(std::uint64_t seed) {
  RngStream rng(seed, 0x6C04);
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const Matrix delta = random_matrix(inst.z.rows(), inst.z.cols(), rng);
    Matrix fd = grad_r(inst.z + h * delta, inst.rate) - grad_r(inst.z - h * delta, inst.rate);
    fd *= 1.0 / (2.0 * h);
    worst = std::max(worst, relative_error(hessian_r_apply(inst.z, delta, inst.rate), fd));
  }
  return worst;
}

double hessian_symmetry(std::uint64_t seed) {
  RngStream rng(seed, 0x6C05);
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const Matrix d1 = random_matrix(inst.z.rows(), inst.z.cols(), rng);
    const Matrix d2 = random_matrix(inst.z.rows(), inst.z.cols(), rng);
    const double a = dot(d1, hessian_r_apply(inst.z, d2, inst.rate));
    const double b = dot(d2, hessian_r_apply(inst.z, d1, inst.rate));
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

// Excess of the largest observed ||H delta|| / ||delta|| over 9 alpha / 4.
double hessian_bound_excess(std::uint64_t seed) {
  RngStream rng(seed, 0x6C06);
  double worst = 0.0;
  for (std::size_t i = 0; i < kRateInstances; ++i) {
    const RateInstance inst = rate_instance(rng);
    const double bound = 2.25 * inst.rate.alpha(inst.z.rows(), inst.z.cols());
    for (int t = 0; t < 100; ++t) {
      Matrix delta = random_matrix(inst.z.rows(), inst.z.cols(), rng);
      delta *= 1.0 / frobenius_norm(delta);
      const double ratio = frobenius_norm(hessian_r_apply(inst.z, delta, inst.rate)) / bound;
      worst = std::max(worst, ratio - 1.0);
    }
  }
  return std::max(worst, 0.0);
}

double encoder_loss_vs_finite_difference(std::uint64_t seed) {
  ModelSpec spec;
  spec.layers = 2;
  spec.dim = 8;
  spec.heads = 2;
  spec.head_dim = 4;
  spec.tokens = 4;
  spec.patch_dim = 6;
  spec.classes = 3;
  const Model model = Model::initialize(spec, seed);
  RngStream rng(seed, 0x6C07);
  const Matrix x = random_matrix(spec.patch_dim, spec.tokens, rng);
  const std::size_t label = rng.index(spec.classes);
  const std::vector<Matrix> at = model.values();
  const ad::ScalarFn f = [&](ad::Tape&, std::span<const ad::Var> v) {
    return classification_loss(spec, crate::bind<ad::Var>(spec, v), x, label, 0.1);
  };
  const auto vg = ad::value_and_grad(f, at);
  const auto fd = ad::finite_difference_grad(f, at);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < at.size(); ++i) {
    num += squared_norm(vg.grads[i] - fd[i]);
    den += squared_norm(fd[i]);
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

GradCheckRegistry GradCheckRegistry::defaults() {
  GradCheckRegistry r;
  r.add({"rc_gradient_closed_form_vs_autodiff", 1e-8, rc_closed_form_vs_autodiff});
  r.add({"rc_gradient_closed_form_vs_finite_difference", 1e-6, rc_closed_form_vs_finite_difference});
  r.add({"r_gradient_vs_finite_difference", 1e-6, r_gradient_vs_finite_difference});
  r.add({"r_hessian_vs_gradient_difference", 1e-6, hessian_vs_gradient_difference});
  r.add({"r_hessian_symmetry", 1e-9, hessian_symmetry});
  r.add({"r_hessian_norm_bound_excess", 0.0, hessian_bound_excess});
  r.add({"classifier_loss_autodiff_vs_finite_difference", 1e-6, encoder_loss_vs_finite_difference});
  return r;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return !results.empty();
}

nlohmann::json to_json(const std::vector<GradCheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& r : results)
    checks.push_back({{"name", r.name}, {"error", r.error}, {"tolerance", r.tolerance}, {"passed", r.passed}});
  return {{"passed", all_passed(results)}, {"checks", checks}};
}

std::vector<GradCheckResult> gradcheck_results_from_json(const nlohmann::json& j) {
  try {
    std::vector<GradCheckResult> out;
    for (const auto& c : j.at("checks"))
      out.push_back({c.at("name").get<std::string>(), c.at("error").get<double>(), c.at("tolerance").get<double>(),
                     c.at("passed").get<bool>()});
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("gradcheck report: ") + e.what());
  }
}

}  // namespace crate
