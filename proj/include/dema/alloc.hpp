#pragma once

// Byte accounting for tensor storage. Every Buffer allocation is counted, so
// benchmarks can report peak live bytes and tests can bound the largest single
// intermediate an operation creates.

#include <atomic>
#include <cstddef>
#include <new>
#include <vector>

namespace dema {

struct AllocStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
  std::size_t largest_bytes = 0;  // largest single allocation
};

namespace detail {
void record_alloc(std::size_t bytes) noexcept;
void record_free(std::size_t bytes) noexcept;
}  // namespace detail

AllocStats alloc_stats() noexcept;
// Resets peak to the current live size and largest to zero.
void reset_alloc_peak() noexcept;

template <class T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    T* p = static_cast<T*>(::operator new(bytes));
    detail::record_alloc(bytes);
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::record_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, TrackedAllocator<double>>;

}  // namespace dema
