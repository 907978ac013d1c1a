#include "pmae/threadpool.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace pmae {

namespace {

size_t read_worker_count() {
    size_t n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("PMAE_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 0) {
            n = std::min<size_t>(n, std::max<long>(v, 1));
            if (v <= 1) n = 1;
        }
    }
    return n;
}

thread_local bool inside_parallel = false;

} // namespace

size_t worker_count() {
    static const size_t n = read_worker_count();
    return n;
}

void parallel_for_chunks(size_t begin, size_t end,
                         const std::function<void(size_t, size_t)>& fn) {
    if (begin >= end) return;
    size_t n = end - begin;
    size_t workers = worker_count();
    if (workers <= 1 || n < 2 || inside_parallel) {
        fn(begin, end);
        return;
    }
    workers = std::min(workers, n);
    size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    std::exception_ptr err;
    std::mutex err_mu;
    for (size_t w = 0; w < workers; ++w) {
        size_t lo = begin + w * chunk;
        size_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        threads.emplace_back([&, lo, hi] {
            inside_parallel = true;
            try {
                fn(lo, hi);
            } catch (...) {
                std::lock_guard<std::mutex> g(err_mu);
                if (!err) err = std::current_exception();
            }
            inside_parallel = false;
        });
    }
    for (auto& t : threads) t.join();
    if (err) std::rethrow_exception(err);
}

void parallel_for(size_t begin, size_t end, const std::function<void(size_t)>& fn) {
    parallel_for_chunks(begin, end, [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) fn(i);
    });
}

} // namespace pmae
