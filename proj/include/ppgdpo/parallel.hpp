#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ppgdpo {

/// Worker count from PPGDPO_WORKERS (default 1).
inline int worker_count() {
    const char* v = std::getenv("PPGDPO_WORKERS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return std::clamp(n, 1, 256);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Tasks write to their own slots, so the
/// result never depends on scheduling. The first exception is rethrown after all workers join.
template <class Fn>
void parallel_for(int n, Fn&& fn, int workers = worker_count()) {
    if (n <= 0) return;
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr err;
    std::mutex mu;
    auto body = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!err) err = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace ppgdpo
