#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mrfnet {

namespace detail {
inline std::atomic<int>& thread_count_storage() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Worker threads used by data-parallel kernels. 1 (the default) runs everything inline.
inline int num_threads() { return detail::thread_count_storage().load(); }
inline void set_num_threads(int n) { detail::thread_count_storage().store(std::max(1, n)); }

// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread, so
// callers that write disjoint outputs per index get identical results for any
// thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const auto threads = static_cast<std::size_t>(num_threads());
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

}  // namespace mrfnet
