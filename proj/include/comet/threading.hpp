#pragma once

#include <cstdint>
#include <functional>

namespace comet {

// Number of threads used by the dense kernels (matmul, conv). Partitioning
// is always by output row, so results are bit-identical for any setting.
void set_math_threads(int n);
int math_threads();

// Runs fn(begin, end) over a contiguous partition of [0, n). The calling
// thread participates; the call returns when all ranges are done. Falls back
// to a single inline call when n or the configured thread count is small.
void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace comet
