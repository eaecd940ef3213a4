#include "crate/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "crate/blocks.hpp"
#include "crate/error.hpp"
#include "crate/linalg.hpp"
#include "crate/parallel.hpp"
#include "crate/rng.hpp"

namespace crate {

double GmmTokenModel::noise_variance() const {
  const double s2 = sigma * sigma;
  return noise == NoiseConvention::PerCoordinate ? s2 : s2 / double(d());
}

std::vector<double> GmmTokenModel::coefficient_variances(std::size_t k) const {
  if (coeff == CoeffConvention::Isotropic) return std::vector<double>(p(), 1.0 / double(p()));
  return coeff_var.at(k);
}

Matrix GmmTokenModel::signal_covariance(std::size_t k) const {
  Matrix scaled = bases.bases[k];
  const auto var = coefficient_variances(k);
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= var[j];
  return matmul_nt(scaled, bases.bases[k]);
}

void GmmTokenModel::validate() const {
  bases.validate();
  if (K() == 0) throw InvalidArgument("gmm: no components");
  if (mixture.size() != K()) throw InvalidArgument("gmm: mixture weights do not match component count");
  double total = 0.0;
  for (double w : mixture) {
    if (!(w >= 0.0)) throw InvalidArgument("gmm: negative mixture weight");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw InvalidArgument("gmm: mixture weights must sum to 1");
  if (!(sigma >= 0.0)) throw InvalidArgument("gmm: sigma must be nonnegative");
  if (coeff == CoeffConvention::Diagonal) {
    if (coeff_var.size() != K()) throw InvalidArgument("gmm: need one coefficient variance vector per component");
    for (const auto& v : coeff_var) {
      if (v.size() != p()) throw InvalidArgument("gmm: coefficient variance length != p");
      for (double x : v)
        if (!(x >= 0.0)) throw InvalidArgument("gmm: negative coefficient variance");
    }
  }
}

GmmTokenModel GmmTokenModel::theorem_config(std::size_t d, std::size_t p, std::size_t K, double sigma, RngStream& rng) {
  GmmTokenModel m;
  m.bases = SubspaceBasisSet::random_mutually_orthogonal(d, p, K, rng);
  m.mixture.assign(K, 1.0 / double(K));
  m.sigma = sigma;
  return m;
}

TokenSample sample_tokens(const GmmTokenModel& model, std::size_t n, RngStream& rng) {
  model.validate();
  const std::size_t d = model.d(), p = model.p(), K = model.K();
  TokenSample out{Matrix(d, n), Matrix(d, n), std::vector<std::size_t>(n)};
  const double noise_sd = std::sqrt(model.noise_variance());
  std::vector<std::vector<double>> sd(K);
  for (std::size_t k = 0; k < K; ++k) {
    sd[k] = model.coefficient_variances(k);
    for (double& v : sd[k]) v = std::sqrt(v);
  }
  std::vector<double> a(p);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t s = K - 1;
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      acc += model.mixture[k];
      if (u < acc) {
        s = k;
        break;
      }
    }
    out.labels[i] = s;
    for (std::size_t j = 0; j < p; ++j) a[j] = sd[s][j] * rng.normal();
    const Matrix& U = model.bases.bases[s];
    for (std::size_t r = 0; r < d; ++r) {
      double v = 0.0;
      for (std::size_t j = 0; j < p; ++j) v += U(r, j) * a[j];
      out.clean(r, i) = v;
      out.tokens(r, i) = v;
    }
    if (noise_sd > 0.0)
      for (std::size_t r = 0; r < d; ++r) out.tokens(r, i) += noise_sd * rng.normal();
  }
  return out;
}

GmmDensity::GmmDensity(const GmmTokenModel& model) : model_(model) {
  model_.validate();
  noise_var_ = model_.noise_variance();
  if (!(noise_var_ > 0.0)) throw InvalidArgument("gmm density requires sigma > 0");
  for (std::size_t k = 0; k < model_.K(); ++k) {
    Matrix cov = model_.signal_covariance(k);
    for (std::size_t i = 0; i < cov.rows(); ++i) cov(i, i) += noise_var_;
    const SymmetricEigen es = symmetric_eigen(cov);
    Matrix whiten = es.vectors, precision = es.vectors;
    double log_det = 0.0;
    for (std::size_t j = 0; j < es.values.size(); ++j) {
      const double lam = std::max(es.values[j], 1e-12);
      log_det -= 0.5 * std::log(lam);
      for (std::size_t i = 0; i < cov.rows(); ++i) {
        whiten(i, j) /= std::sqrt(lam);
        precision(i, j) /= lam;
      }
    }
    whitener_.push_back(matmul_nt(whiten, es.vectors));
    precision_.push_back(matmul_nt(precision, es.vectors));
    log_det_m_.push_back(log_det);
  }
}

std::vector<double> GmmDensity::log_weights(const Matrix& x, bool include_normalizer) const {
  if (x.rows() != model_.d() || x.cols() != 1) throw ShapeMismatch("gmm: expected a d x 1 point");
  std::vector<double> lw(model_.K());
  for (std::size_t k = 0; k < lw.size(); ++k) {
    const double q = squared_norm(matmul(whitener_[k], x));
    lw[k] = -0.5 * q;
    if (include_normalizer) lw[k] += std::log(model_.mixture[k]) + log_det_m_[k];
  }
  return lw;
}

double GmmDensity::log_density(const Matrix& x) const {
  const std::vector<double> lw = log_weights(x, true);
  const double m = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(m)) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (double v : lw) s += std::exp(v - m);
  return m + std::log(s) - 0.5 * double(model_.d()) * std::log(2.0 * std::numbers::pi);
}

bool GmmDensity::normalization_holds(double rel_tol) const {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t k = 0; k < model_.K(); ++k) {
    const double v = std::log(model_.mixture[k]) + log_det_m_[k];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // compare the normalizers themselves, not their logs
  return std::expm1(hi - lo) <= rel_tol;
}

Matrix GmmDensity::score(const Matrix& x, ScoreForm form, bool* normalization_ok) const {
  if (normalization_ok) *normalization_ok = form == ScoreForm::General || normalization_holds();
  std::vector<double> lw = log_weights(x, form == ScoreForm::General);
  const double m = *std::max_element(lw.begin(), lw.end());
  double total = 0.0;
  for (double& v : lw) {
    v = std::exp(v - m);
    total += v;
  }
  Matrix s(x.rows(), 1);
  for (std::size_t k = 0; k < lw.size(); ++k) {
    if (lw[k] == 0.0) continue;
    s -= (lw[k] / total) * matmul(precision_[k], x);
  }
  return s;
}

Matrix GmmDensity::tweedie(const Matrix& x) const { return x + noise_var_ * score(x); }

Matrix GmmDensity::tweedie_approx(const Matrix& x) const {
  const auto& bases = model_.bases.bases;
  std::vector<Matrix> coords;
  std::vector<double> logits;
  for (const Matrix& u : bases) {
    coords.push_back(matmul_tn(u, x));
    logits.push_back(squared_norm(coords.back()) / (2.0 * noise_var_));
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& v : logits) {
    v = std::exp(v - m);
    total += v;
  }
  Matrix out(x.rows(), 1);
  for (std::size_t k = 0; k < bases.size(); ++k) out += (logits[k] / total) * matmul(bases[k], coords[k]);
  return out;
}

double gmm_log_density(const Matrix& x, const GmmTokenModel& model) { return GmmDensity(model).log_density(x); }

Matrix gmm_score(const Matrix& x, const GmmTokenModel& model, ScoreForm form, bool* normalization_ok) {
  return GmmDensity(model).score(x, form, normalization_ok);
}

Matrix tweedie_denoise(const Matrix& x, const GmmTokenModel& model) { return GmmDensity(model).tweedie(x); }

Matrix tweedie_denoise_approx(const Matrix& x, const GmmTokenModel& model) {
  return GmmDensity(model).tweedie_approx(x);
}

SubspaceProjection nearest_subspace_project(const Matrix& x, const SubspaceBasisSet& bases) {
  if (bases.K() == 0) throw InvalidArgument("nearest_subspace_project: no bases");
  if (x.rows() != bases.d() || x.cols() != 1) throw ShapeMismatch("nearest_subspace_project: expected a d x 1 point");
  std::size_t best = 0;
  double best_norm = -1.0;
  Matrix best_coords;
  for (std::size_t k = 0; k < bases.K(); ++k) {
    Matrix c = matmul_tn(bases.bases[k], x);
    const double v = squared_norm(c);
    if (v > best_norm) {
      best_norm = v;
      best = k;
      best_coords = std::move(c);
    }
  }
  return {matmul(bases.bases[best], best_coords), best};
}

std::vector<double> time_schedule(double horizon, double kappa, std::size_t layers) {
  if (!(horizon > 0.0) || !(kappa > 0.0)) throw InvalidArgument("time_schedule: horizon and kappa must be positive");
  std::vector<double> t(layers + 1);
  t[0] = horizon / std::pow(1.0 + 2.0 * kappa, double(layers));
  for (std::size_t l = 1; l <= layers; ++l) t[l] = (1.0 + 2.0 * kappa) * t[l - 1];
  t[layers] = horizon;
  return t;
}

double theorem_epsilon(double sigma, std::size_t d, std::size_t n, std::size_t K) {
  if (!(sigma > 0.0)) throw InvalidArgument("theorem_epsilon: sigma must be positive");
  const double e2 = sigma * double(d) / (double(n) * double(K) * std::sqrt(sigma + std::sqrt(double(n) / double(d))));
  return std::sqrt(e2);
}

void ExperimentConfig::validate() const {
  if (!(d >= n && n >= p && p >= K && K >= 2))
    throw InvalidArgument("experiment: need d >= n >= p >= K >= 2");
  if (K * p != d) throw InvalidArgument("experiment: need K p = d");
  if (sigmas.empty()) throw InvalidArgument("experiment: no noise levels");
  for (double s : sigmas)
    if (!(s >= 0.0) || !std::isfinite(s)) throw InvalidArgument("experiment: sigma must be finite and nonnegative");
  if (trials == 0) throw InvalidArgument("experiment: trials must be positive");
  if (epsilon && !(*epsilon > 0.0)) throw InvalidArgument("experiment: epsilon must be positive");
}

Quantiles quantiles(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("quantiles: empty sample");
  std::sort(v.begin(), v.end());
  auto q = [&](double f) {
    const double pos = f * double(v.size() - 1);
    const std::size_t lo = std::size_t(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
  };
  return {q(0.10), q(0.25), q(0.50), q(0.75), q(0.90)};
}

bool ExperimentReport::alignment_increases_as_sigma_decreases() const {
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : results)
    if (r.alignment) pts.emplace_back(r.sigma, r.alignment->q50);
  if (pts.size() < 2) return false;
  std::sort(pts.begin(), pts.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (!(pts[i].second > pts[i - 1].second)) return false;
  return true;
}

namespace {

double cosine(const Matrix& a, const Matrix& b) {
  const double na = frobenius_norm(a), nb = frobenius_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

Matrix apply_update(CompressionUpdate update, const Matrix& z, const SubspaceBasisSet& u, const RateParams& rate) {
  const double beta = rate.beta(u.p(), z.cols());
  if (update == CompressionUpdate::GradientStep) return z - (1.0 / beta) * grad_rc_exact(z, u, rate);
  RateParams r = rate;
  r.kappa = 1.0 / beta;
  return compression_step(z, exact_basis_attention(u, beta, 1.0), r, StepVariant::Convex);
}

double off_subspace_residual(const Matrix& z, std::size_t col, const Matrix& u) {
  const Matrix x = z.col(col);
  return frobenius_norm(x - matmul(u, matmul_tn(u, x)));
}

struct TrialOutcome {
  std::size_t decreased = 0;
  std::size_t alternate_decreased = 0;
  double residual_before = 0.0;
  double residual_after = 0.0;
  std::vector<double> alignments;
};

TrialOutcome run_trial(const ExperimentConfig& cfg, double sigma, double epsilon, RngStream rng) {
  GmmTokenModel model = GmmTokenModel::theorem_config(cfg.d, cfg.p, cfg.K, sigma, rng);
  model.noise = cfg.noise;
  const TokenSample sample = sample_tokens(model, cfg.n, rng);
  RateParams rate;
  rate.epsilon = epsilon;
  const Matrix& z = sample.tokens;
  const Matrix next = apply_update(cfg.update, z, model.bases, rate);
  const CompressionUpdate other =
      cfg.update == CompressionUpdate::GradientStep ? CompressionUpdate::ConvexMssa : CompressionUpdate::GradientStep;
  const Matrix alt = apply_update(other, z, model.bases, rate);

  TrialOutcome out;
  std::optional<GmmDensity> density;
  if (model.noise_variance() > 0.0) density.emplace(model);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const Matrix& u = model.bases.bases[sample.labels[i]];
    const double before = off_subspace_residual(z, i, u);
    const double after = off_subspace_residual(next, i, u);
    out.residual_before += before;
    out.residual_after += after;
    if (after < before) ++out.decreased;
    if (off_subspace_residual(alt, i, u) < before) ++out.alternate_decreased;
    if (density) {
      const Matrix x = z.col(i);
      out.alignments.push_back(cosine(next.col(i) - x, density->tweedie(x) - x));
    }
  }
  out.residual_before /= double(cfg.n);
  out.residual_after /= double(cfg.n);
  return out;
}

}  // namespace

ExperimentReport compression_denoising_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentReport report{cfg, {}};
  RngStream root(cfg.seed, 0x67AA);
  for (std::size_t si = 0; si < cfg.sigmas.size(); ++si) {
    const double sigma = cfg.sigmas[si];
    const double eps = cfg.epsilon ? *cfg.epsilon : (sigma > 0.0 ? theorem_epsilon(sigma, cfg.d, cfg.n, cfg.K) : 0.5);
    std::vector<TrialOutcome> outcomes(cfg.trials);
    const RngStream sigma_stream = root.substream(si);
    parallel_for(cfg.trials, [&](std::size_t t) { outcomes[t] = run_trial(cfg, sigma, eps, sigma_stream.substream(t)); });

    SigmaResult r;
    r.sigma = sigma;
    r.epsilon = eps;
    r.tokens = cfg.trials * cfg.n;
    std::size_t dec = 0, alt = 0;
    std::vector<double> all;
    for (const TrialOutcome& o : outcomes) {
      dec += o.decreased;
      alt += o.alternate_decreased;
      r.trial_residual_before.push_back(o.residual_before);
      r.trial_residual_after.push_back(o.residual_after);
      if (!o.alignments.empty()) {
        r.trial_alignment_median.push_back(quantiles(o.alignments).q50);
        all.insert(all.end(), o.alignments.begin(), o.alignments.end());
      }
    }
    r.residual_decrease_fraction = double(dec) / double(r.tokens);
    r.alternate_residual_decrease_fraction = double(alt) / double(r.tokens);
    if (!all.empty()) r.alignment = quantiles(all);
    report.results.push_back(std::move(r));
  }
  return report;
}

namespace {

nlohmann::json quantiles_json(const std::optional<Quantiles>& q) {
  if (!q) return nullptr;
  return {{"q10", q->q10}, {"q25", q->q25}, {"q50", q->q50}, {"q75", q->q75}, {"q90", q->q90}};
}

std::optional<Quantiles> quantiles_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return Quantiles{j.at("q10").get<double>(), j.at("q25").get<double>(), j.at("q50").get<double>(),
                   j.at("q75").get<double>(), j.at("q90").get<double>()};
}

const char* update_name(CompressionUpdate u) { return u == CompressionUpdate::GradientStep ? "gradient_step" : "convex_mssa"; }
const char* noise_name(NoiseConvention n) { return n == NoiseConvention::Normalized ? "normalized" : "per_coordinate"; }

}  // namespace

nlohmann::json to_json(const ExperimentReport& report) {
  const ExperimentConfig& c = report.config;
  nlohmann::json sweep = nlohmann::json::array();
  for (const SigmaResult& r : report.results) {
    sweep.push_back({{"sigma", r.sigma},
                     {"epsilon", r.epsilon},
                     {"tokens", r.tokens},
                     {"residual_decrease_fraction", r.residual_decrease_fraction},
                     {"alternate_residual_decrease_fraction", r.alternate_residual_decrease_fraction},
                     {"alignment_quantiles", quantiles_json(r.alignment)},
                     {"trial_residual_before", r.trial_residual_before},
                     {"trial_residual_after", r.trial_residual_after},
                     {"trial_alignment_median", r.trial_alignment_median}});
  }
  const SigmaResult& head = report.results.at(0);
  return {{"d", c.d},
          {"n", c.n},
          {"p", c.p},
          {"K", c.K},
          {"sigma", head.sigma},
          {"trials", c.trials},
          {"seed", c.seed},
          {"residual_decrease_fraction", head.residual_decrease_fraction},
          {"alignment_quantiles", quantiles_json(head.alignment)},
          {"sigmas", c.sigmas},
          {"epsilon_override", c.epsilon ? nlohmann::json(*c.epsilon) : nlohmann::json(nullptr)},
          {"update", update_name(c.update)},
          {"alternate_update", update_name(c.update == CompressionUpdate::GradientStep ? CompressionUpdate::ConvexMssa
                                                                                         : CompressionUpdate::GradientStep)},
          {"noise", noise_name(c.noise)},
          {"alignment_increases_as_sigma_decreases", report.alignment_increases_as_sigma_decreases()},
          {"sweep", sweep}};
}

ExperimentReport experiment_report_from_json(const nlohmann::json& j) {
  try {
    ExperimentReport r;
    ExperimentConfig& c = r.config;
    c.d = j.at("d").get<std::size_t>();
    c.n = j.at("n").get<std::size_t>();
    c.p = j.at("p").get<std::size_t>();
    c.K = j.at("K").get<std::size_t>();
    c.trials = j.at("trials").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.sigmas = j.at("sigmas").get<std::vector<double>>();
    if (!j.at("epsilon_override").is_null()) c.epsilon = j.at("epsilon_override").get<double>();
    c.update = j.at("update").get<std::string>() == "gradient_step" ? CompressionUpdate::GradientStep
                                                                     : CompressionUpdate::ConvexMssa;
    c.noise = j.at("noise").get<std::string>() == "normalized" ? NoiseConvention::Normalized
                                                               : NoiseConvention::PerCoordinate;
    for (const auto& s : j.at("sweep")) {
      SigmaResult x;
      x.sigma = s.at("sigma").get<double>();
      x.epsilon = s.at("epsilon").get<double>();
      x.tokens = s.at("tokens").get<std::size_t>();
      x.residual_decrease_fraction = s.at("residual_decrease_fraction").get<double>();
      x.alternate_residual_decrease_fraction = s.at("alternate_residual_decrease_fraction").get<double>();
      x.alignment = quantiles_from(s.at("alignment_quantiles"));
      x.trial_residual_before = s.at("trial_residual_before").get<std::vector<double>>();
      x.trial_residual_after = s.at("trial_residual_after").get<std::vector<double>>();
      x.trial_alignment_median = s.at("trial_alignment_median").get<std::vector<double>>();
      r.results.push_back(std::move(x));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("experiment report: ") + e.what());
  }
}

}  // namespace crate
