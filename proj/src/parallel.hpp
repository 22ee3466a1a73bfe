#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace inrc {

// Process-wide default worker count. 0 means "hardware concurrency".
void set_default_threads(int n);
int default_threads();
int resolve_threads(int requested); // requested <= 0 falls back to the default

// Runs fn(chunk_index, begin, end) over [0, total) split into fixed-size
// chunks. Chunk boundaries depend only on `total` and `grain`, never on the
// worker count, so per-chunk results merged in chunk order are identical for
// any number of threads.
void parallel_chunks(std::size_t total, std::size_t grain, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

inline std::size_t chunk_count(std::size_t total, std::size_t grain) {
  return grain == 0 ? 0 : (total + grain - 1) / grain;
}

} // namespace inrc
