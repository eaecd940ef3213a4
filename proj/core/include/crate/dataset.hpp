#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crate/matrix.hpp"

namespace crate {

// Samples of N raw tokens each (D x N), optionally with class labels.
struct Dataset {
  std::size_t patch_dim = 0;  // D
  std::size_t tokens = 0;     // N
  std::vector<Matrix> samples;
  std::vector<std::uint32_t> labels;  // empty when unlabeled

  std::size_t size() const { return samples.size(); }
  bool labeled() const { return !labels.empty(); }
  void validate() const;
  Dataset subset(std::size_t begin, std::size_t end) const;
};

// CRTD binary format: "CRTD", then little-endian u32 version (1),
// sample_count, D, N, label_kind (0 none, 1 class), then sample_count*D*N
// little-endian f32 (sample-major, each sample row-major D x N), then one u32
// label per sample when label_kind == 1.
std::string encode_crtd(const Dataset& data);
Dataset decode_crtd(const std::string& bytes);
void write_crtd(const std::filesystem::path& path, const Dataset& data);
Dataset read_crtd(const std::filesystem::path& path);

// Token sets drawn from a union of low-dimensional subspaces. Each class owns
// `subspaces_per_class` random subspaces of dimension `subspace_dim` in R^D;
// a sample of class c draws each token from one of class c's subspaces plus
// N(0, sigma^2/D I) noise. Values are rounded to f32 so the set survives a
// CRTD round trip unchanged.
struct SyntheticGmmConfig {
  std::size_t samples = 256;
  std::size_t tokens = 16;
  std::size_t patch_dim = 16;
  std::size_t classes = 4;
  std::size_t subspaces_per_class = 2;
  std::size_t subspace_dim = 2;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

Dataset synthetic_gmm_dataset(const SyntheticGmmConfig& config);

}  // namespace crate
