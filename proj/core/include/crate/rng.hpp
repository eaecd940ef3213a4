#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace crate {

// Counter-based Philox4x32-10 generator. A draw is a pure function of
// (seed, stream, counter), so streams handed to different workers never
// overlap and reproduce regardless of scheduling.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  // Child stream keyed by `id`; independent of how much of *this was consumed.
  RngStream substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  double uniform();  // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);
  double normal();   // standard normal, Box-Muller
  std::size_t index(std::size_t n);  // uniform on [0, n)

  // k distinct indices drawn uniformly from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);
  std::vector<std::size_t> permutation(std::size_t n);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type(0); }
  result_type operator()() { return next_u64(); }

  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key);

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace crate
