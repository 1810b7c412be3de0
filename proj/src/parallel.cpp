#include "vhm/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace vhm {

namespace {

int resolve_worker_count() {
    if (const char* env = std::getenv("VHM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Persistent pool; spawning threads per conv call would dominate small layers.
class Pool {
public:
    static Pool& instance() {
        static Pool pool(resolve_worker_count());
        return pool;
    }

    int workers() const { return workers_; }

    void run(size_t n, const std::function<void(size_t, size_t)>& fn) {
        if (n == 0) return;
        const size_t chunks = std::min(n, static_cast<size_t>(workers_));
        if (chunks <= 1) {
            fn(0, n);
            return;
        }
        {
            std::unique_lock<std::mutex> lk(m_);
            fn_ = &fn;
            total_ = n;
            chunks_ = chunks;
            next_chunk_ = 0;
            pending_ = chunks;
            ++generation_;
        }
        cv_.notify_all();
        work(); // main thread participates
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    explicit Pool(int workers) : workers_(workers) {
        for (int i = 0; i + 1 < workers_; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(m_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            work();
        }
    }

    void work() {
        for (;;) {
            size_t chunk;
            const std::function<void(size_t, size_t)>* fn;
            size_t total, chunks;
            {
                std::unique_lock<std::mutex> lk(m_);
                if (fn_ == nullptr || next_chunk_ >= chunks_) return;
                chunk = next_chunk_++;
                fn = fn_;
                total = total_;
                chunks = chunks_;
            }
            const size_t b = chunk * total / chunks;
            const size_t e = (chunk + 1) * total / chunks;
            (*fn)(b, e);
            {
                std::unique_lock<std::mutex> lk(m_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    int workers_;
    std::vector<std::thread> threads_;
    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(size_t, size_t)>* fn_ = nullptr;
    size_t total_ = 0, chunks_ = 0, next_chunk_ = 0, pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

} // namespace

int worker_count() { return Pool::instance().workers(); }

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& range_fn) {
    Pool::instance().run(n, range_fn);
}

} // namespace vhm
