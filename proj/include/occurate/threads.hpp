#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace occurate {

// Worker cap from OCCURATE_THREADS; defaults to 1 so results are
// reproducible without any environment setup.
inline int thread_count() {
    const char* env = std::getenv("OCCURATE_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    if (n < 1) return 1;
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw > 0 && n > hw) n = hw;
    return n;
}

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker,
// so results are identical for any thread count as long as fn(i) writes
// only to slot i.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    int workers = thread_count();
    if (workers <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (workers > n) workers = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int64_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace occurate
