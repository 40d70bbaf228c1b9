#include "rrl/common.hpp"

#include <algorithm>
#include <mutex>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace rrl {

namespace {
// Large op buffers churn at tensor rates; keeping them on the main heap
// instead of per-allocation mmap avoids refaulting pages on every op.
struct MallocTuning {
    MallocTuning() {
#ifdef __GLIBC__
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
    }
};
const MallocTuning malloc_tuning;
}  // namespace

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    int64_t hw = static_cast<int64_t>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    int64_t threads = std::min(hw, (n + grain - 1) / grain);
    if (threads <= 1) {
        fn(0, n);
        return;
    }
    int64_t chunk = (n + threads - 1) / threads;
    std::exception_ptr err;
    std::mutex err_mu;
    auto run = [&](int64_t lo, int64_t hi) {
        try {
            fn(lo, hi);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
        }
    };
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(threads) - 1);
    for (int64_t t = 1; t < threads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back(run, lo, hi);
    }
    run(0, std::min(chunk, n));
    for (auto& w : workers) w.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace rrl
