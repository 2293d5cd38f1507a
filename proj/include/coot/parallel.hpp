#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace coot {

// Worker-thread budget: COOT_THREADS caps it, 0 or unset means auto.
inline unsigned worker_threads() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("COOT_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v > 0) return unsigned(v) < hw ? unsigned(v) : hw;
    }
    return hw;
}

// Runs fn(i) for i in [0, n). Each index writes only its own slot, so the
// result is identical to a sequential loop.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    unsigned workers = worker_threads();
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (std::size_t(workers) > n) workers = unsigned(n);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : threads) t.join();
}

} // namespace coot
