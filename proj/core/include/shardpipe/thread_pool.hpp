#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace shardpipe {

// Fixed-size pool that runs one fork/join job at a time. The calling thread
// participates as worker 0, so a pool of size 1 spawns no threads at all.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads);
  ~ThreadPool();

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const noexcept { return workers_.size() + 1; }

  // Runs fn(part) for part in [0, parts) and blocks until all calls returned.
  // The first exception thrown by any part is rethrown on the caller.
  void run(std::size_t parts, const std::function<void(std::size_t)>& fn);

 private:
  void worker_loop(std::size_t index);

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t parts_ = 0;
  std::size_t next_part_ = 0;
  std::size_t active_ = 0;
  std::size_t generation_ = 0;
  std::exception_ptr error_;
  bool stop_ = false;
  std::mutex run_mu_;
};

// Process-wide pool with the given number of threads, created on first use.
ThreadPool& shared_pool(std::size_t threads);

// Splits [0, total) into `parts` contiguous ranges whose sizes differ by at
// most one, larger ranges first.
struct Range {
  std::size_t begin;
  std::size_t end;
};
Range balanced_range(std::size_t total, std::size_t parts, std::size_t index);

// Logical cores visible to this process (at least 1).
std::size_t detected_cores();

}  // namespace shardpipe
