#include "shardpipe/thread_pool.hpp"

#include <map>
#include <memory>

namespace shardpipe {

ThreadPool::ThreadPool(std::size_t threads) {
  const std::size_t extra = threads > 1 ? threads - 1 : 0;
  workers_.reserve(extra);
  for (std::size_t i = 0; i < extra; ++i) {
    workers_.emplace_back([this, i] { worker_loop(i + 1); });
  }
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  for (auto& t : workers_) t.join();
}

void ThreadPool::run(std::size_t parts, const std::function<void(std::size_t)>& fn) {
  if (parts == 0) return;
  if (workers_.empty() || parts == 1) {
    for (std::size_t p = 0; p < parts; ++p) fn(p);
    return;
  }

  std::lock_guard serial(run_mu_);
  {
    std::lock_guard lock(mu_);
    job_ = &fn;
    parts_ = parts;
    next_part_ = 0;
    active_ = workers_.size();
    error_ = nullptr;
    ++generation_;
  }
  wake_.notify_all();

  // Caller drains parts alongside the workers.
  for (;;) {
    std::size_t part;
    {
      std::lock_guard lock(mu_);
      if (next_part_ >= parts_) break;
      part = next_part_++;
    }
    try {
      fn(part);
    } catch (...) {
      std::lock_guard lock(mu_);
      if (!error_) error_ = std::current_exception();
    }
  }

  std::unique_lock lock(mu_);
  done_.wait(lock, [this] { return active_ == 0; });
  job_ = nullptr;
  if (error_) std::rethrow_exception(error_);
}

void ThreadPool::worker_loop(std::size_t) {
  std::size_t seen = 0;
  for (;;) {
    std::unique_lock lock(mu_);
    wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
    if (stop_) return;
    seen = generation_;
    const auto* job = job_;
    while (next_part_ < parts_) {
      const std::size_t part = next_part_++;
      lock.unlock();
      try {
        (*job)(part);
      } catch (...) {
        lock.lock();
        if (!error_) error_ = std::current_exception();
        lock.unlock();
      }
      lock.lock();
    }
    if (--active_ == 0) done_.notify_all();
  }
}

ThreadPool& shared_pool(std::size_t threads) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<ThreadPool>> pools;
  if (threads == 0) threads = 1;
  std::lock_guard lock(mu);
  auto& slot = pools[threads];
  if (!slot) slot = std::make_unique<ThreadPool>(threads);
  return *slot;
}

Range balanced_range(std::size_t total, std::size_t parts, std::size_t index) {
  const std::size_t base = total / parts;
  const std::size_t extra = total % parts;
  const std::size_t begin = index * base + (index < extra ? index : extra);
  const std::size_t len = base + (index < extra ? 1 : 0);
  return {begin, begin + len};
}

std::size_t detected_cores() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

}  // namespace shardpipe
