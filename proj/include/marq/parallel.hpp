#pragma once

#include <cstddef>
#include <functional>

namespace marq {

// Runs fn(i) for i in [0, n) on at most `jobs` threads. Callers write results
// into per-index slots, so the outcome does not depend on scheduling.
// The first exception thrown by any task is rethrown on the calling thread.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace marq
