#pragma once

// Deterministic work partitioning. Work is split into fixed-size blocks up
// front; threads only pick which block runs where, never how results are
// combined. Reductions that care about float ordering must accumulate
// per-block and fold the blocks serially (see conv2d backward).

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ncd {

inline int max_threads() {
    static const int cap = [] {
        if (const char* env = std::getenv("NCD_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : int(hw);
    }();
    return cap;
}

// Runs fn(block_index) for block_index in [0, nblocks). Blocks are claimed
// from a shared counter; each block's work is single-threaded.
template <typename Fn>
void parallel_blocks(int nblocks, Fn&& fn) {
    int nthreads = std::min(nblocks, max_threads());
    if (nthreads <= 1) {
        for (int b = 0; b < nblocks; ++b) fn(b);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (;;) {
            int b = next.fetch_add(1);
            if (b >= nblocks) break;
            fn(b);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(size_t(nthreads - 1));
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
}

// Index range [begin, end) of block b when n items are cut into nblocks.
struct BlockRange {
    long begin, end;
};
inline BlockRange block_range(long n, int nblocks, int b) {
    long base = n / nblocks, rem = n % nblocks;
    long begin = b * base + std::min<long>(b, rem);
    long len = base + (b < rem ? 1 : 0);
    return {begin, begin + len};
}

}  // namespace ncd
