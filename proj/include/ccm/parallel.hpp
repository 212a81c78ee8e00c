#pragma once

#include <cstdint>
#include <functional>

namespace ccm {

// Worker cap, read once from CCM_THREADS (default: hardware concurrency).
int worker_threads();
void set_worker_threads(int n);

// Runs fn over disjoint contiguous chunks of [0, n). Each index is visited by
// exactly one call, so per-index work is identical for any thread count.
// Callers must not reduce across indices inside fn.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace ccm
