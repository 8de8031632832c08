#pragma once

#include <functional>

namespace vonet {

// Worker cap: min(hardware_concurrency, VONET_THREADS) when the
// environment variable is set, at least 1.
int default_threads();

// Runs fn(begin, end) over `threads` contiguous chunks of [0, n). The
// partition depends only on (n, threads), so results are reproducible
// for a fixed thread count; callers needing bitwise determinism across
// thread counts must make chunks independent.
void parallel_for_chunks(int n, int threads,
                         const std::function<void(int, int)>& fn);

}  // namespace vonet
