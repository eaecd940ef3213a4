#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "crate/model.hpp"

namespace crate {

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
};

// Writes a JSON manifest at `manifest` and the tensors as little-endian f32 in
// manifest order to a sidecar file named `<manifest>.bin`. The manifest
// records the model spec, tensor names, shapes, byte offsets, seed and format
// version.
void save_checkpoint(const std::filesystem::path& manifest, const Model& model, std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest);

}  // namespace crate
