#pragma once

#include <cstddef>
#include <functional>

namespace pmae {

// Worker count for parallel_for: min(hardware_concurrency, PMAE_THREADS).
// PMAE_THREADS unset or invalid means no cap; 0/1 forces serial execution.
size_t worker_count();

// Runs fn(i) for i in [begin, end). Splits the range into contiguous chunks,
// one per worker. Runs inline when the range is small, when only one worker
// is available, or when called from inside another parallel_for.
void parallel_for(size_t begin, size_t end, const std::function<void(size_t)>& fn);

// Chunked variant: fn(lo, hi) per contiguous chunk. Cheaper when the body is tiny.
void parallel_for_chunks(size_t begin, size_t end,
                         const std::function<void(size_t, size_t)>& fn);

} // namespace pmae
