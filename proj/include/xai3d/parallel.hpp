#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace xai3d {

/// Process-wide worker count used by parallel_for; 1 runs inline.
inline std::atomic<int>& thread_count() {
  static std::atomic<int> count{1};
  return count;
}

inline void set_thread_count(int n) { thread_count() = std::max(1, n); }

inline bool& inside_parallel_region() {
  thread_local bool inside = false;
  return inside;
}

/// Calls fn(i) for i in [0, n). Each index is handled exactly once; callers write results by index,
/// so output is independent of the worker count. Nested calls from a worker run inline.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const auto workers = std::min<std::size_t>(std::size_t(thread_count().load()), n);
  if (workers <= 1 || inside_parallel_region()) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      inside_parallel_region() = true;
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace xai3d
