#ifndef CODA_PARALLEL_HPP
#define CODA_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace coda {

// Worker-thread cap: explicit argument wins, then CODA_THREADS, then 1.
// Results must be written to per-index slots so accumulation order stays
// deterministic regardless of the thread count.
inline int resolve_threads(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CODA_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

template <typename F>
void parallel_for(int n, int threads, F&& body) {
  threads = std::min(resolve_threads(threads), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace coda

#endif  // CODA_PARALLEL_HPP
