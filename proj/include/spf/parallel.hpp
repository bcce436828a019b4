#pragma once

#include <cstdint>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace spf {

// Intermediate tensors are large enough that glibc would mmap/munmap them on
// every allocation; keep them on the heap free lists instead.
inline bool tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  return done;
#else
  return false;
#endif
}

// Global thread cap. Parallel loops partition output elements by ownership
// (each element written by exactly one thread), so results are bitwise
// identical for any thread count; --deterministic simply forces 1.
//
// Default is single-threaded: the tensors here are small enough that OpenMP
// fork/join overhead usually exceeds the win. SPF_THREADS overrides.
inline int& max_threads_ref() {
  static int n = [] {
    if (const char* env = std::getenv("SPF_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return n;
}

inline void set_max_threads(int n) { max_threads_ref() = n < 1 ? 1 : n; }
inline int max_threads() { return max_threads_ref(); }

template <typename Fn>
void parallel_for(std::int64_t n, Fn fn) {
#ifdef _OPENMP
  if (max_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

// Threads pay for themselves only on sizeable work; `work` approximates the
// total scalar-op count. Thread count never affects results, only speed.
constexpr std::int64_t kParallelWorkThreshold = 1 << 19;

template <typename Fn>
void parallel_for_work(std::int64_t n, std::int64_t work, Fn fn) {
  if (work >= kParallelWorkThreshold) {
    parallel_for(n, fn);
  } else {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
  }
}

}  // namespace spf
