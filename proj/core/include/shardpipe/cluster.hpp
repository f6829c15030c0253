#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shardpipe/bytes.hpp"
#include "shardpipe/errors.hpp"
#include "shardpipe/xshards.hpp"

namespace shardpipe {

struct ClusterConfig {
  std::size_t n_workers = 1;
  std::string host = "127.0.0.1";
  std::uint16_t base_port = 0;  // driver listen port, 0 = ephemeral
  double handshake_timeout_s = 10.0;
  double heartbeat_interval_s = 0.2;
  double heartbeat_timeout_s = 2.0;
  double shutdown_grace_s = 2.0;
  // Defaults to the running executable, which must call maybe_run_worker.
  std::string worker_executable;
  std::vector<std::string> worker_extra_args;
  // Address handed to workers instead of the real listener (fault injection).
  std::optional<std::string> advertised_driver;
};

// Throws ClusterError for n_workers == 0 or non-positive timeouts.
void validate(const ClusterConfig& cfg);

enum class ClusterState { Launching, Ready, ShuttingDown, Down };
std::string_view to_string(ClusterState s);

class LaunchError : public ClusterError {
 public:
  LaunchError(const std::string& why, std::vector<int> missing);
  const std::vector<int>& missing_workers() const noexcept { return missing_; }

 private:
  std::vector<int> missing_;
};

// Raised by blocking cluster calls once request_interrupt() has been called.
class Interrupted : public ClusterError {
 public:
  Interrupted() : ClusterError("interrupted") {}
};

// Async-signal-safe; meant for SIGINT handlers.
void request_interrupt() noexcept;
bool interrupt_requested() noexcept;
void clear_interrupt() noexcept;

struct WorkerStatus {
  int id = 0;
  int pid = 0;
  bool alive = false;
  std::chrono::milliseconds since_heartbeat{0};
};

// Driver side of a local multi-process cluster. Public operations are not
// thread-safe; callers serialize them. The thread that calls launch() should
// outlive the cluster: workers are tied to it with PR_SET_PDEATHSIG.
//
// Failure policy is fail-fast. After a worker dies or a task fails, every
// later operation throws ClusterError and the cluster has to be relaunched.
class ClusterContext {
 public:
  static std::unique_ptr<ClusterContext> launch(const ClusterConfig& cfg);

  ~ClusterContext();
  ClusterContext(const ClusterContext&) = delete;
  ClusterContext& operator=(const ClusterContext&) = delete;

  // Idempotent; sends Shutdown, waits shutdown_grace_s, then SIGKILLs.
  void shutdown() noexcept;

  ClusterState state() const noexcept;
  std::size_t size() const noexcept;
  std::vector<int> worker_pids() const;
  std::vector<WorkerStatus> status() const;

  // Returns once every worker has reached the barrier.
  void barrier();
  // Every worker stores an identical copy of `payload`.
  void broadcast(std::span<const std::byte> payload);
  // Worker i receives partition i. The partition count must equal size().
  void scatter_shards(const Shards& s);

  // Runs a registered task everywhere; results are ordered by worker id.
  std::vector<Bytes> run_task(const std::string& name, std::span<const std::byte> args = {});
  // Same, with a separate argument payload per worker.
  std::vector<Bytes> run_task_per_worker(const std::string& name, const std::vector<Bytes>& args);

 private:
  struct Impl;
  explicit ClusterContext(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace shardpipe
