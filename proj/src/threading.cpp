#include "backchain/threading.hpp"

#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace backchain {

int worker_count() {
    static const int cached = [] {
        if (const char* env = std::getenv("BACKCHAIN_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return cached;
}

namespace {

// Persistent pool; jobs are (begin, end) range calls. The submitting thread
// runs the first chunk itself. The first exception raised in any lane is
// rethrown to the submitter once the job has drained.
class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 1; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~Pool() {
        {
            std::unique_lock lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int lanes() const { return static_cast<int>(threads_.size()) + 1; }

    void run(size_t n, const std::function<void(size_t, size_t)>& fn) {
        const int w = lanes();
        const size_t chunk = (n + static_cast<size_t>(w) - 1) / static_cast<size_t>(w);
        {
            std::unique_lock lock(mu_);
            job_ = &fn;
            job_n_ = n;
            job_chunk_ = chunk;
            pending_ = w - 1;
            error_ = nullptr;
            ++generation_;
        }
        cv_.notify_all();
        run_chunk(fn, 0, n, chunk);
        std::unique_lock lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
        if (error_) {
            auto err = error_;
            error_ = nullptr;
            lock.unlock();
            std::rethrow_exception(err);
        }
    }

private:
    void run_chunk(const std::function<void(size_t, size_t)>& fn, int lane, size_t n,
                   size_t chunk) {
        const size_t begin = static_cast<size_t>(lane) * chunk;
        if (begin >= n) return;
        const size_t end = std::min(n, begin + chunk);
        try {
            fn(begin, end);
        } catch (...) {
            std::unique_lock lock(mu_);
            if (!error_) error_ = std::current_exception();
        }
    }

    void worker_loop(int lane);

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(size_t, size_t)>* job_ = nullptr;
    size_t job_n_ = 0;
    size_t job_chunk_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr error_ = nullptr;
};

thread_local bool inside_parallel = false;

void Pool::worker_loop(int lane) {
    inside_parallel = true;  // nested parallel_for from a worker runs inline
    uint64_t seen = 0;
    for (;;) {
        const std::function<void(size_t, size_t)>* job = nullptr;
        size_t n = 0, chunk = 0;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            job = job_;
            n = job_n_;
            chunk = job_chunk_;
        }
        if (job) run_chunk(*job, lane, n, chunk);
        {
            std::unique_lock lock(mu_);
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }
}

Pool& pool() {
    static Pool p(worker_count());
    return p;
}

}  // namespace

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    if (inside_parallel || worker_count() == 1 || n == 1) {
        fn(0, n);
        return;
    }
    inside_parallel = true;
    try {
        pool().run(n, fn);
    } catch (...) {
        inside_parallel = false;
        throw;
    }
    inside_parallel = false;
}

}  // namespace backchain
