#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

namespace reldet {

// 64-byte-aligned allocator. Buffers handed to Eigen via Map must have a
// fixed alignment phase, otherwise SIMD head/tail peeling reorders float
// reductions between runs and artifacts stop being bit-identical.
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    const std::size_t bytes = (n * sizeof(T) + alignment - 1) / alignment * alignment;
    void* p = std::aligned_alloc(alignment, bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAlloc<U>&) const { return false; }
};

using AlignedVec = std::vector<double, AlignedAlloc<double>>;

}  // namespace reldet
