#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fbsde {

/// Paths are processed in fixed-size chunks. Reductions combine per-chunk
/// partial results in chunk order, so results never depend on worker count.
inline constexpr std::size_t kChunkSize = 512;

inline std::size_t chunk_count(std::size_t items) { return (items + kChunkSize - 1) / kChunkSize; }

/// Runs fn(chunk_index, begin, end) for every chunk of [0, items) on up to
/// `workers` threads.
template <typename Fn>
void for_each_chunk(std::size_t items, int workers, Fn&& fn) {
    const std::size_t chunks = chunk_count(items);
    auto run = [&](std::size_t c) { fn(c, c * kChunkSize, std::min(items, (c + 1) * kChunkSize)); };
    const auto threads = static_cast<std::size_t>(std::max(1, workers));
    if (threads == 1 || chunks <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) run(c);
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    const std::size_t used = std::min(threads, chunks);
    pool.reserve(used);
    for (std::size_t w = 0; w < used; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t c = w; c < chunks; c += used) run(c);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace fbsde
