#pragma once

#include <cstddef>
#include <functional>

namespace devmod {

/// Worker count: DEVMOD_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
int thread_limit();

/// Calls fn(i) for i in [0, n) on up to thread_limit() threads. Iterations
/// must be independent. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace devmod
