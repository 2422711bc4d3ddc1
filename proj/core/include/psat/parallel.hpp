#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace psat {

// Runs fn over [0,n) split into contiguous chunks, one per worker. Callers
// guarantee fn writes only into its own range, so the result is identical for
// any worker count. The first exception thrown in a worker is rethrown here.
inline void parallel_chunks(size_t n, int workers,
                            const std::function<void(size_t, size_t)>& fn) {
  if (n == 0) return;
  size_t w = workers < 1 ? 1 : static_cast<size_t>(workers);
  if (w > n) w = n;
  if (w == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  std::exception_ptr first;
  std::mutex mu;
  const size_t chunk = (n + w - 1) / w;
  for (size_t t = 0; t < w; ++t) {
    const size_t lo = t * chunk;
    const size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, lo, hi]() {
      try {
        fn(lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> g(mu);
        if (!first) first = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace psat
