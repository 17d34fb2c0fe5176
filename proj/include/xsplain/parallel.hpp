#pragma once

#include <thread>
#include <vector>

namespace xsplain {

// Runs fn(i) for i in [0, n) across up to `threads` workers on contiguous
// index chunks. Each index is processed exactly once, so results written to
// per-index slots are identical for any thread count; callers that reduce
// must do so over the slots in index order afterwards.
template <class Fn>
void parallel_for(int64_t n, int threads, Fn&& fn) {
    if (n <= 0) return;
    threads = std::max(1, threads);
    if (threads == 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace xsplain
