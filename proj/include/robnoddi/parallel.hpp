#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace robnoddi {

/// Global worker cap; 0 means hardware concurrency. Set from the CLI
/// --threads flag.
inline int& thread_cap() {
  static int cap = 0;
  return cap;
}

inline void set_thread_cap(int n) { thread_cap() = n < 0 ? 0 : n; }

inline int effective_threads(std::size_t items) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0)
    hw = 1;
  std::size_t t = thread_cap() > 0 ? static_cast<std::size_t>(thread_cap()) : hw;
  if (t > items)
    t = items;
  return static_cast<int>(t == 0 ? 1 : t);
}

/// Runs body(i) for i in [0, n). body must only write state that is disjoint
/// per index, so results are identical for any thread count.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  const int threads = effective_threads(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i)
      body(i);
    return;
  }
  std::atomic<std::size_t> cursor{0};
  const std::size_t block = 8;
  auto worker = [&]() {
    for (;;) {
      const std::size_t start = cursor.fetch_add(block);
      if (start >= n)
        return;
      const std::size_t stop = std::min(n, start + block);
      for (std::size_t i = start; i < stop; ++i)
        body(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads) - 1);
  for (int t = 1; t < threads; ++t)
    pool.emplace_back(worker);
  worker();
  for (auto& th : pool)
    th.join();
}

} // namespace robnoddi
