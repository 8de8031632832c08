#include "vonet/threads.h"

#include "vonet/tensor.h"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace vonet {

int default_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("VONET_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

void parallel_for_chunks(int n, int threads,
                         const std::function<void(int, int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1 || n <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  const bool grad_mode = grad_enabled();
  std::vector<std::thread> pool;
  int base = n / threads, extra = n % threads;
  int begin = 0;
  for (int i = 0; i < threads; ++i) {
    int len = base + (i < extra ? 1 : 0);
    int end = begin + len;
    if (len > 0)
      pool.emplace_back([&fn, begin, end, grad_mode] {
        set_grad_enabled(grad_mode);
        fn(begin, end);
      });
    begin = end;
  }
  for (auto& t : pool) t.join();
}

}  // namespace vonet
