#include "dema/alloc.hpp"

#include <algorithm>

namespace dema {
namespace {

std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
std::atomic<std::size_t> g_largest{0};

void raise_to(std::atomic<std::size_t>& target, std::size_t value) noexcept {
  std::size_t seen = target.load(std::memory_order_relaxed);
  while (value > seen && !target.compare_exchange_weak(seen, value, std::memory_order_relaxed)) {
  }
}

}  // namespace

namespace detail {

void record_alloc(std::size_t bytes) noexcept {
  const std::size_t live = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  raise_to(g_peak, live);
  raise_to(g_largest, bytes);
}

void record_free(std::size_t bytes) noexcept {
  g_live.fetch_sub(bytes, std::memory_order_relaxed);
}

}  // namespace detail

AllocStats alloc_stats() noexcept {
  return {g_live.load(), g_peak.load(), g_largest.load()};
}

void reset_alloc_peak() noexcept {
  const std::size_t live = g_live.load();
  g_peak.store(live);
  g_largest.store(0);
}

}  // namespace dema
