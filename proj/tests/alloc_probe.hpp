#pragma once

// Heap watermark for tests. Replaces the C allocator entry points (Eigen
// allocates through malloc, not operator new) and tracks live and peak bytes
// and live and peak block counts.
// Include from exactly one translation unit per binary. glibc only.

#include <malloc.h>

#include <atomic>
#include <cstddef>

extern "C" {
void* __libc_malloc(std::size_t);
void* __libc_calloc(std::size_t, std::size_t);
void* __libc_realloc(void*, std::size_t);
void* __libc_memalign(std::size_t, std::size_t);
void __libc_free(void*);
}

namespace alloc_probe {

inline std::atomic<long long> live{0};
inline std::atomic<long long> peak{0};
inline std::atomic<long long> count{0};  // allocation calls since reset
inline std::atomic<long long> blocks{0};
inline std::atomic<long long> peak_blocks{0};

inline void bump_max(std::atomic<long long>& hi, long long now) {
  long long prev = hi.load();
  while (now > prev && !hi.compare_exchange_weak(prev, now)) {
  }
}

inline void on_alloc(void* p) {
  if (!p) return;
  const long long now = live += static_cast<long long>(malloc_usable_size(p));
  ++count;
  bump_max(peak, now);
  bump_max(peak_blocks, ++blocks);
}

inline void on_free(void* p) {
  if (!p) return;
  live -= static_cast<long long>(malloc_usable_size(p));
  --blocks;
}

inline void on_free_size(long long n) {
  live -= n;
  --blocks;
}

/// Resets the watermark to the current live size.
inline void reset() {
  peak = live.load();
  peak_blocks = blocks.load();
  count = 0;
}

/// Bytes above the live size at the last reset.
inline long long peak_above(long long base) { return peak.load() - base; }
inline long long peak_blocks_above(long long base) { return peak_blocks.load() - base; }

}  // namespace alloc_probe

extern "C" {

void* malloc(std::size_t n) {
  void* p = __libc_malloc(n);
  alloc_probe::on_alloc(p);
  return p;
}

void* calloc(std::size_t a, std::size_t b) {
  void* p = __libc_calloc(a, b);
  alloc_probe::on_alloc(p);
  return p;
}

void* realloc(void* q, std::size_t n) {
  const long long old = q ? static_cast<long long>(malloc_usable_size(q)) : 0;
  void* p = __libc_realloc(q, n);
  if (p) {
    if (q) alloc_probe::on_free_size(old);
    alloc_probe::on_alloc(p);
  } else if (n == 0 && q) {
    alloc_probe::on_free_size(old);
  }
  return p;
}

void* memalign(std::size_t a, std::size_t n) {
  void* p = __libc_memalign(a, n);
  alloc_probe::on_alloc(p);
  return p;
}

int posix_memalign(void** out, std::size_t a, std::size_t n) {
  void* p = __libc_memalign(a, n);
  if (!p) return 12;  // ENOMEM
  alloc_probe::on_alloc(p);
  *out = p;
  return 0;
}

void* aligned_alloc(std::size_t a, std::size_t n) {
  void* p = __libc_memalign(a, n);
  alloc_probe::on_alloc(p);
  return p;
}

void free(void* p) {
  alloc_probe::on_free(p);
  __libc_free(p);
}
}
