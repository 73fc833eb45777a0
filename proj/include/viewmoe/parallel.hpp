// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace viewmoe {

namespace detail {
inline std::atomic<int>& thread_count_storage() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Worker count used by the row-partitioned kernels. 1 is the default.
inline int num_threads() { return detail::thread_count_storage().load(); }
inline void set_num_threads(int n) { detail::thread_count_storage().store(std::max(1, n)); }

/// Runs fn(lo, hi) over a static partition of [0, n). Each index is owned by exactly
/// one worker, so results do not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n / std::max<std::size_t>(1, min_chunk));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t step = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = w * step;
    const std::size_t hi = std::min(n, lo + step);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

/// Keeps freed tensor buffers in the heap instead of returning them to the OS.
/// Training allocates and frees the same large buffers every step; without this
/// each allocation pays fresh page faults.
inline void retain_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace viewmoe
