#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace saoc {

// Fork-join helper over [0, n). Work is split into contiguous chunks whose
// boundaries depend only on (n, thread count), and every output element is
// written by exactly one chunk, so results do not depend on scheduling.
// Nested calls from inside a worker run serially to avoid oversubscription.

inline int& max_threads() {
    static int n = 4;
    return n;
}

inline void set_max_threads(int n) { max_threads() = std::max(1, n); }

namespace detail {
inline bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

template <typename F>
void parallel_for(int64_t n, F&& body) {
    if (n <= 0) return;
    const int threads = std::min<int64_t>(max_threads(), n);
    if (threads <= 1 || detail::in_parallel_region()) {
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    const int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            detail::in_parallel_region() = true;
            for (int64_t i = lo; i < hi; ++i) body(i);
            detail::in_parallel_region() = false;
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace saoc
