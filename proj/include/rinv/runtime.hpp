#pragma once

namespace rinv {

/// Keeps large tensor buffers on the heap instead of fresh mmap/munmap pairs.
/// Training allocates and frees multi-megabyte activations every step; with
/// glibc defaults most of the wall time goes to page faults. No-op elsewhere.
void tune_allocator();

}  // namespace rinv
