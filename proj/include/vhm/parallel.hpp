#pragma once

#include <cstddef>
#include <functional>

namespace vhm {

// Worker count: VHM_THREADS if set, else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Work is split into one contiguous range per
// worker; every element is written by exactly one invocation, so results do
// not depend on the number of workers.
void parallel_for(size_t n, const std::function<void(size_t begin, size_t end)>& range_fn);

inline void parallel_for_each(size_t n, const std::function<void(size_t)>& fn) {
    parallel_for(n, [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) fn(i);
    });
}

} // namespace vhm
