#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

namespace nfa {

/// Minimal 64-byte-aligning allocator. Buffers handed to Eigen go through
/// this so kernel selection (and therefore rounding) never depends on where
/// the heap happened to place an operand.
template <typename T, std::size_t Align = 64>
struct AlignedAlloc {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAlloc<U, Align>;
  };
  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U, Align>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = std::aligned_alloc(Align, ((n * sizeof(T) + Align - 1) / Align) * Align);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAlloc<U, Align>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAlloc<U, Align>&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAlloc<T, 64>>;

}  // namespace nfa
