#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace neuvv {

/// Worker count used by the parallel loops; 0 means hardware concurrency.
inline std::size_t& thread_override() {
  static std::size_t n = 0;
  return n;
}

inline std::size_t worker_count() {
  if (thread_override() > 0) return thread_override();
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(chunk_begin, chunk_end) over [0, n) split into chunks of `grain`.
/// Chunks are claimed dynamically; callers must make per-index work
/// independent so results do not depend on scheduling.
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t grain, Fn&& fn) {
  if (n == 0) return;
  grain = std::max<std::size_t>(1, grain);
  const std::size_t chunks = (n + grain - 1) / grain;
  const std::size_t workers = std::min(worker_count(), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c * grain, std::min(n, (c + 1) * grain));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    try {
      for (std::size_t c = next++; c < chunks; c = next++) fn(c * grain, std::min(n, (c + 1) * grain));
    } catch (...) {
      std::lock_guard lock(error_mu);
      if (!error) error = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t i = 0; i + 1 < workers; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t grain = 64) {
  parallel_chunks(n, grain, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace neuvv
