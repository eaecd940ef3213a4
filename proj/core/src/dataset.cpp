#include "crate/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crate/error.hpp"
#include "crate/linalg.hpp"
#include "crate/rng.hpp"

namespace crate {

void Dataset::validate() const {
  for (const Matrix& s : samples)
    if (s.rows() != patch_dim || s.cols() != tokens)
      throw ShapeMismatch("dataset: sample is " + s.shape_string() + ", expected " + std::to_string(patch_dim) + "x" +
                          std::to_string(tokens));
  if (!labels.empty() && labels.size() != samples.size()) throw ShapeMismatch("dataset: label count != sample count");
}

Dataset Dataset::subset(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw InvalidArgument("dataset: subset out of range");
  Dataset d{patch_dim, tokens, {samples.begin() + long(begin), samples.begin() + long(end)}, {}};
  if (labeled()) d.labels.assign(labels.begin() + long(begin), labels.begin() + long(end));
  return d;
}

namespace {

constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(char((v >> (8 * b)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("CRTD: truncated file");
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= std::uint32_t(std::uint8_t(in[pos + std::size_t(b)])) << (8 * b);
  pos += 4;
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFull) throw InvalidArgument(std::string("CRTD: ") + what + " exceeds u32");
  return std::uint32_t(v);
}

}  // namespace

std::string encode_crtd(const Dataset& data) {
  data.validate();
  std::string out = "CRTD";
  put_u32(out, kVersion);
  put_u32(out, checked_u32(data.size(), "sample count"));
  put_u32(out, checked_u32(data.patch_dim, "D"));
  put_u32(out, checked_u32(data.tokens, "N"));
  put_u32(out, data.labeled() ? 1u : 0u);
  out.reserve(out.size() + data.size() * data.patch_dim * data.tokens * 4 + data.labels.size() * 4);
  for (const Matrix& s : data.samples)
    for (double v : s.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  for (std::uint32_t l : data.labels) put_u32(out, l);
  return out;
}

Dataset decode_crtd(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CRTD") != 0) throw FormatError("CRTD: bad magic");
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kVersion) throw FormatError("CRTD: unsupported version " + std::to_string(version));
  const std::size_t count = get_u32(bytes, pos);
  Dataset d;
  d.patch_dim = get_u32(bytes, pos);
  d.tokens = get_u32(bytes, pos);
  const std::uint32_t label_kind = get_u32(bytes, pos);
  if (label_kind > 1) throw FormatError("CRTD: unknown label kind " + std::to_string(label_kind));
  const std::size_t per = d.patch_dim * d.tokens;
  const std::size_t expected = pos + count * per * 4 + (label_kind ? count * 4 : 0);
  if (bytes.size() != expected)
    throw FormatError("CRTD: file has " + std::to_string(bytes.size()) + " bytes, header implies " + std::to_string(expected));
  d.samples.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Matrix m(d.patch_dim, d.tokens);
    for (std::size_t k = 0; k < per; ++k) {
      const float f = std::bit_cast<float>(get_u32(bytes, pos));
      if (!std::isfinite(f)) throw FormatError("CRTD: non-finite value");
      m[k] = f;
    }
    d.samples.push_back(std::move(m));
  }
  if (label_kind)
    for (std::size_t s = 0; s < count; ++s) d.labels.push_back(get_u32(bytes, pos));
  return d;
}

void write_crtd(const std::filesystem::path& path, const Dataset& data) {
  const std::string bytes = encode_crtd(data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidArgument("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw InvalidArgument("failed writing " + path.string());
}

Dataset read_crtd(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_crtd(ss.str());
}

Dataset synthetic_gmm_dataset(const SyntheticGmmConfig& cfg) {
  if (cfg.classes == 0 || cfg.subspaces_per_class == 0 || cfg.subspace_dim == 0 || cfg.tokens == 0 || cfg.patch_dim == 0)
    throw InvalidArgument("synthetic dataset: sizes must be positive");
  if (cfg.subspace_dim > cfg.patch_dim) throw InvalidArgument("synthetic dataset: subspace_dim > patch_dim");
  if (!(cfg.sigma >= 0.0)) throw InvalidArgument("synthetic dataset: sigma must be nonnegative");
  RngStream basis_rng(cfg.seed, 0xBA5E);
  std::vector<Matrix> bases;
  for (std::size_t s = 0; s < cfg.classes * cfg.subspaces_per_class; ++s)
    bases.push_back(random_orthonormal(cfg.patch_dim, cfg.subspace_dim, basis_rng));

  Dataset d;
  d.patch_dim = cfg.patch_dim;
  d.tokens = cfg.tokens;
  RngStream rng(cfg.seed, 0xDA7A);
  const double coeff_sd = 1.0 / std::sqrt(double(cfg.subspace_dim));
  const double noise_sd = cfg.sigma / std::sqrt(double(cfg.patch_dim));
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const std::size_t c = rng.index(cfg.classes);
    Matrix x(cfg.patch_dim, cfg.tokens);
    for (std::size_t t = 0; t < cfg.tokens; ++t) {
      const Matrix& u = bases[c * cfg.subspaces_per_class + rng.index(cfg.subspaces_per_class)];
      for (std::size_t j = 0; j < cfg.subspace_dim; ++j) {
        const double a = coeff_sd * rng.normal();
        for (std::size_t r = 0; r < cfg.patch_dim; ++r) x(r, t) += a * u(r, j);
      }
      for (std::size_t r = 0; r < cfg.patch_dim; ++r) x(r, t) += noise_sd * rng.normal();
    }
    for (double& v : x.values()) v = static_cast<float>(v);
    d.samples.push_back(std::move(x));
    d.labels.push_back(std::uint32_t(c));
  }
  return d;
}

}  // namespace crate
