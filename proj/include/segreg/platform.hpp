#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace segreg {

// Training allocates and frees multi-megabyte activation buffers every step.
// glibc serves those with mmap by default, paying page faults each time; keep
// them on the heap instead. No effect elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

}  // namespace segreg
