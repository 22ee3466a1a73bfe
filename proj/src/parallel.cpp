#include "parallel.hpp"

#include <algorithm>
#include <mutex>

namespace inrc {

namespace {
std::atomic<int> g_default_threads{0};
}

void set_default_threads(int n) { g_default_threads.store(n < 0 ? 0 : n); }

int default_threads() { return g_default_threads.load(); }

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : g_default_threads.load();
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

void parallel_chunks(std::size_t total, std::size_t grain, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (total == 0) return;
  if (grain == 0) grain = total;
  const std::size_t nchunks = chunk_count(total, grain);
  const int nworkers = std::min<std::size_t>(resolve_threads(threads), nchunks);

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * grain;
    const std::size_t end = std::min(total, begin + grain);
    fn(c, begin, end);
  };

  if (nworkers <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c) run_chunk(c);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nworkers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int w = 0; w < nworkers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= nchunks) return;
        try {
          run_chunk(c);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

} // namespace inrc
