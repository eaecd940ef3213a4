#pragma once

#include <cstddef>
#include <functional>

namespace crate {

// Worker cap: CRATE_THREADS if set to a positive integer, else the hardware
// concurrency (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index runs
// exactly once; callers write results into per-index slots and reduce in
// index order afterwards, which keeps results independent of thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace crate
