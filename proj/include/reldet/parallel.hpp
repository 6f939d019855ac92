#pragma once

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace reldet {

inline int default_threads() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

// Run fn(i) for i in [0, n). Work items must be independent; each writes
// only its own output slot, so results do not depend on the thread count.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
  threads = std::max(1, threads);
  if (threads == 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) break;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int k = std::min<size_t>(threads, n);
  pool.reserve(k);
  for (int t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

}  // namespace reldet
