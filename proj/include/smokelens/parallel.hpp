#pragma once

#include <cstddef>
#include <functional>

namespace smokelens {

// Worker cap: SMOKELENS_THREADS if set and positive, else logical cores.
int worker_count();

// Runs body(i) for i in [0, count). Each index is handled exactly once; callers
// write results to disjoint slots so the outcome is independent of scheduling.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace smokelens
