#pragma once

#include <cstddef>
#include <functional>

namespace moedis {

// Worker cap: MOE_DISENTANGLE_THREADS if set to a positive integer, else the
// machine's hardware concurrency (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n) across up to worker_count() threads. Each index
// runs exactly once; callers write results into per-index slots and reduce in
// index order afterwards. The first exception thrown is rethrown here.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace moedis
