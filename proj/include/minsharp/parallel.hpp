#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace minsharp {

inline std::size_t default_threads() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Splits [0, n) into fixed chunks of `chunk` items, evaluates `fn(begin, end)`
// for every chunk (possibly on several threads) and returns the per-chunk
// results in chunk order. Chunk boundaries do not depend on the thread count,
// so a caller that reduces the returned vector front to back gets the same
// bits for any `threads`.
template <typename Fn>
auto map_chunks(std::size_t n, std::size_t chunk, std::size_t threads, Fn&& fn) {
  using Result = decltype(fn(std::size_t{0}, std::size_t{0}));
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t num_chunks = (n + chunk - 1) / chunk;
  std::vector<Result> results(num_chunks);
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(num_chunks, 1));

  if (threads == 1) {
    for (std::size_t c = 0; c < num_chunks; ++c)
      results[c] = fn(c * chunk, std::min(n, (c + 1) * chunk));
    return results;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c = next++; c < num_chunks; c = next++)
          results[c] = fn(c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace minsharp
