#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace slotnorm {

// Minimal persistent pool for data-parallel loops. Work is cut into chunks
// whose boundaries depend only on the problem size, never on the thread
// count, and each chunk writes disjoint outputs -- so results are bitwise
// identical whether SLOTNORM_THREADS is 1 or 64.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // Invokes chunk_fn(c) for c in [0, nchunks), distributing chunks across
  // the pool plus the calling thread. Blocks until every chunk is done.
  void run(std::int64_t nchunks, const std::function<void(std::int64_t)>& chunk_fn) {
    if (nchunks <= 0) return;
    if (workers_.empty() || nchunks == 1) {
      for (std::int64_t c = 0; c < nchunks; ++c) chunk_fn(c);
      return;
    }
    {
      std::unique_lock lock(mutex_);
      job_ = &chunk_fn;
      nchunks_ = nchunks;
      next_chunk_.store(0, std::memory_order_relaxed);
      pending_workers_ = static_cast<int>(workers_.size());
      ++generation_;
    }
    cv_.notify_all();
    drain();
    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [&] { return pending_workers_ == 0; });
    job_ = nullptr;
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

 private:
  ThreadPool() {
    int n = 0;
    if (const char* env = std::getenv("SLOTNORM_THREADS")) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    for (int i = 1; i < n; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  ~ThreadPool() {
    {
      std::unique_lock lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lock.unlock();
      drain();
      lock.lock();
      if (--pending_workers_ == 0) done_cv_.notify_one();
    }
  }

  void drain() {
    for (;;) {
      const std::int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= nchunks_) return;
      (*job_)(c);
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::int64_t)>* job_ = nullptr;
  std::atomic<std::int64_t> next_chunk_{0};
  std::int64_t nchunks_ = 0;
  int pending_workers_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Runs body(begin, end) over fixed-size slices of [0, n). The slicing is a
// pure function of n and grain, which is what keeps parallel results stable.
inline void parallel_for(std::int64_t n, std::int64_t grain,
                         const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  const std::int64_t nchunks = (n + grain - 1) / grain;
  ThreadPool::instance().run(nchunks, [&](std::int64_t c) {
    const std::int64_t begin = c * grain;
    const std::int64_t end = begin + grain < n ? begin + grain : n;
    body(begin, end);
  });
}

}  // namespace slotnorm
