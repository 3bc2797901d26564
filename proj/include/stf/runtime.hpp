#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stf {

// Training allocates and frees the same large activation buffers every step.
// glibc would otherwise hand them back to the kernel each time.
inline void keep_heap_resident() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace stf
