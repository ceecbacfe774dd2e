#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bincmp {

/// Fixed set of threads running index ranges with static chunking. The calling
/// thread takes the first chunk, so a pool of one worker spawns no threads.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t workers = 1) : workers_(workers == 0 ? 1 : workers) {
    for (std::size_t w = 1; w < workers_; ++w) threads_.emplace_back([this, w] { loop(w); });
  }

  ~WorkerPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    start_.notify_all();
    for (auto& t : threads_) t.join();
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  std::size_t workers() const { return workers_; }

  /// Calls fn(i) for i in [0, n). Exceptions are not caught here; fn must not throw.
  void run(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (workers_ == 1 || n < 2 * workers_) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    {
      std::lock_guard lock(mutex_);
      task_ = &fn;
      count_ = n;
      pending_ = workers_ - 1;
      ++generation_;
    }
    start_.notify_all();
    run_chunk(0, n, fn);
    std::unique_lock lock(mutex_);
    done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
  }

 private:
  void run_chunk(std::size_t w, std::size_t n, const std::function<void(std::size_t)>& fn) const {
    const std::size_t begin = w * n / workers_;
    const std::size_t end = (w + 1) * n / workers_;
    for (std::size_t i = begin; i < end; ++i) fn(i);
  }

  void loop(std::size_t w) {
    std::size_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* task = nullptr;
      std::size_t n = 0;
      {
        std::unique_lock lock(mutex_);
        start_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        task = task_;
        n = count_;
      }
      run_chunk(w, n, *task);
      {
        std::lock_guard lock(mutex_);
        if (--pending_ == 0) done_.notify_one();
      }
    }
  }

  std::size_t workers_;
  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable start_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t count_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace bincmp
