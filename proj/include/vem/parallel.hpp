#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace vem {

namespace detail {
// Set on worker threads so nested loops run serially.
inline thread_local bool in_parallel_region = false;
}  // namespace detail

/// Process-wide worker count used by block-parallel loops.
int num_threads();
void set_num_threads(int threads);

/// Run fn(i) for i in [0, n) on up to num_threads() threads using contiguous
/// static chunks. Callers write per-index results and reduce afterwards in a
/// fixed order, so results do not depend on the thread count.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  const int threads = detail::in_parallel_region ? 1 : std::min(num_threads(), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      detail::in_parallel_region = true;
      try {
        const int lo = t * chunk;
        const int hi = std::min(n, lo + chunk);
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace vem
