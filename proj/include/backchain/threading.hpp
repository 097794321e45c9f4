#pragma once

#include <cstddef>
#include <functional>

namespace backchain {

// Worker cap: BACKCHAIN_THREADS if set, else hardware concurrency.
int worker_count();

// Runs fn(begin, end) over a static partition of [0, n) on the shared pool.
// Each index is owned by exactly one worker and partitions depend only on n
// and the worker count, so any reduction that writes disjoint outputs (or
// accumulates per-index in ascending order) is bit-deterministic.
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn);

}  // namespace backchain
