#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace echoatt {

// Persistent worker pool for data-parallel loops. parallel_for splits [0, n)
// into one contiguous chunk per worker, so every output element is computed by
// exactly one thread with a fixed inner accumulation order: results are
// bit-identical for any worker count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    // Number of workers used by parallel_for (including the calling thread).
    int workers() const { return workers_.load(std::memory_order_relaxed); }

    void set_workers(int n) {
        if (n < 1) n = 1;
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw >= 1 && n > 4 * hw) n = 4 * hw;
        workers_.store(n, std::memory_order_relaxed);
        ensure_threads(n - 1);
    }

    // body(begin, end) is invoked on disjoint chunks covering [0, n).
    // Nested calls from inside a chunk run inline.
    void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
        int w = workers();
        if (n <= 0) return;
        if (w <= 1 || n == 1 || in_parallel_) {
            body(0, n);
            return;
        }
        int chunks = static_cast<int>(w) < n ? w : static_cast<int>(n);
        ensure_threads(chunks - 1);

        std::atomic<int> remaining(chunks - 1);
        int64_t per = n / chunks;
        int64_t extra = n % chunks;
        int64_t begin = 0;
        {
            std::lock_guard<std::mutex> lock(mu_);
            for (int c = 0; c < chunks - 1; ++c) {
                int64_t len = per + (c < extra ? 1 : 0);
                int64_t end = begin + len;
                tasks_.push_back([&body, &remaining, begin, end] {
                    in_parallel_ = true;
                    body(begin, end);
                    in_parallel_ = false;
                    remaining.fetch_sub(1, std::memory_order_acq_rel);
                });
                begin = end;
            }
        }
        cv_.notify_all();
        in_parallel_ = true;
        body(begin, n);  // caller takes the final chunk
        in_parallel_ = false;
        while (remaining.load(std::memory_order_acquire) != 0) std::this_thread::yield();
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

private:
    ThreadPool() {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        workers_.store(hw >= 1 ? hw : 1, std::memory_order_relaxed);
    }

    void ensure_threads(int n) {
        std::lock_guard<std::mutex> lock(mu_);
        while (static_cast<int>(threads_.size()) < n) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return stopping_ || !tasks_.empty(); });
                if (stopping_ && tasks_.empty()) return;
                task = std::move(tasks_.back());
                tasks_.pop_back();
            }
            task();
        }
    }

    std::atomic<int> workers_{1};
    std::vector<std::thread> threads_;
    std::vector<std::function<void()>> tasks_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    static thread_local bool in_parallel_;
};

inline thread_local bool ThreadPool::in_parallel_ = false;

inline void set_workers(int n) { ThreadPool::instance().set_workers(n); }
inline int worker_count() { return ThreadPool::instance().workers(); }

// Parallel loop over [0, n). Falls back to inline execution when the total
// amount of work is too small to amortize synchronization.
inline void parallel_for(int64_t n, int64_t flops_per_item,
                         const std::function<void(int64_t, int64_t)>& body) {
    constexpr int64_t kMinFlops = 16 * 1024;
    if (n * flops_per_item < kMinFlops) {
        body(0, n);
        return;
    }
    ThreadPool::instance().parallel_for(n, body);
}

}  // namespace echoatt
