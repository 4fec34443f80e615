#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace mbq {

/// Runs fn(i) for i in [0, n) across `workers` threads in contiguous chunks.
/// Callers own determinism: write per-index results, then reduce in index
/// order after this returns. An exception thrown by fn aborts that worker's
/// chunk; the exception with the lowest index is rethrown on the caller.
template <class F>
void parallel_index(int n, int workers, F&& fn) {
    if (workers <= 1 || n < 2) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    const int used = std::min(workers, n);
    const int chunk = (n + used - 1) / used;
    std::vector<std::thread> pool;
    std::vector<std::pair<int, std::exception_ptr>> errors;
    pool.reserve(used);
    errors.reserve(used);
    for (int w = 0; w < used; ++w) {
        const int lo = w * chunk;
        const int hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        errors.push_back({n, nullptr});
        auto& slot = errors.back();
        pool.emplace_back([&fn, lo, hi, &slot] {
            for (int i = lo; i < hi; ++i) {
                try {
                    fn(i);
                } catch (...) {
                    slot = {i, std::current_exception()};
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    const auto first = std::min_element(errors.begin(), errors.end(),
                                        [](const auto& a, const auto& b) { return a.first < b.first; });
    if (first != errors.end() && first->second) std::rethrow_exception(first->second);
}

}  // namespace mbq
