#include "crate/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "crate/error.hpp"

namespace crate {

namespace {

constexpr int kFormatVersion = 1;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidArgument("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw InvalidArgument("failed writing " + path.string());
}

}  // namespace

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p += ".bin";
  return p;
}

void save_checkpoint(const std::filesystem::path& manifest, const Model& model, std::uint64_t seed) {
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Tensor& t : model.tensors()) {
    tensors.push_back({{"name", t.name},
                       {"shape", {t.value.rows(), t.value.cols()}},
                       {"offset", blob.size()},
                       {"bytes", t.value.size() * 4}});
    for (double v : t.value.values()) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int b = 0; b < 4; ++b) blob.push_back(char((bits >> (8 * b)) & 0xFF));
    }
  }
  const nlohmann::json j = {{"format", "crate-checkpoint"},
                            {"format_version", kFormatVersion},
                            {"seed", seed},
                            {"model", to_json(model.spec())},
                            {"blob", checkpoint_blob_path(manifest).filename().string()},
                            {"blob_bytes", blob.size()},
                            {"tensors", tensors}};
  dump(manifest, j.dump(2) + "\n");
  dump(checkpoint_blob_path(manifest), blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(slurp(manifest));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) throw FormatError("checkpoint: unsupported format version");
    const ModelSpec spec = model_spec_from_json(j.at("model"));
    const std::filesystem::path blob_path = manifest.parent_path() / j.at("blob").get<std::string>();
    const std::string blob = slurp(blob_path);
    if (blob.size() != j.at("blob_bytes").get<std::size_t>()) throw FormatError("checkpoint: blob size mismatch");
    std::vector<Tensor> tensors;
    for (const auto& t : j.at("tensors")) {
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw FormatError("checkpoint: tensor shape must have two entries");
      const std::size_t offset = t.at("offset").get<std::size_t>();
      Matrix m(shape[0], shape[1]);
      if (offset + m.size() * 4 > blob.size()) throw FormatError("checkpoint: tensor extends past blob end");
      for (std::size_t k = 0; k < m.size(); ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(std::uint8_t(blob[offset + 4 * k + std::size_t(b)])) << (8 * b);
        const float f = std::bit_cast<float>(bits);
        if (!std::isfinite(f)) throw FormatError("checkpoint: non-finite value in " + t.at("name").get<std::string>());
        m[k] = f;
      }
      tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
    }
    return {Model(spec, std::move(tensors)), j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace crate
