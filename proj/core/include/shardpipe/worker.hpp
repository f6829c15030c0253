#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shardpipe/bytes.hpp"
#include "shardpipe/communicator.hpp"
#include "shardpipe/nn.hpp"
#include "shardpipe/xshards.hpp"

namespace shardpipe {

// Model replica held by a worker between tasks.
struct ModelReplica {
  ModelSpec spec;
  ModelParams params;
  SgdConfig sgd;
};

// Everything a worker keeps across tasks.
struct WorkerState {
  int id = 0;
  int n_workers = 1;
  Bytes broadcast;                    // last Broadcast payload
  std::optional<RecordBatch> partition;  // last Scatter payload
  std::optional<ModelReplica> model;
};

struct TaskContext {
  WorkerState& state;
  Communicator& comm;
};

using TaskFn = std::function<Bytes(TaskContext&, std::span<const std::byte> args)>;

// Static table of named tasks. The driver and the workers run the same binary,
// so a task registered at static-init time exists on both sides.
class TaskRegistry {
 public:
  static TaskRegistry& instance();

  // Throws Error if `name` is already taken.
  void add(const std::string& name, TaskFn fn);
  const TaskFn* find(const std::string& name) const;
  std::vector<std::string> names() const;

  // Runs `name` in-process; unknown names throw Error.
  Bytes run(const std::string& name, TaskContext& ctx, std::span<const std::byte> args) const;

 private:
  TaskRegistry();
  std::map<std::string, TaskFn> tasks_;
};

// Registers a task during static initialization:
//   static shardpipe::TaskRegistrar reg("my_task", [](TaskContext& c, auto args) { ... });
struct TaskRegistrar {
  TaskRegistrar(const std::string& name, TaskFn fn) {
    TaskRegistry::instance().add(name, std::move(fn));
  }
};

// Command line of a worker process:
//   <exe> --worker --id <n> --driver <host:port> [--timeout <s>] [--heartbeat-ms <ms>]
struct WorkerArgs {
  int id = 0;
  std::string driver_host;
  std::uint16_t driver_port = 0;
  double timeout_s = 10.0;
  int heartbeat_ms = 200;
};

// nullopt unless argv contains --worker. Malformed worker arguments throw
// ClusterError.
std::optional<WorkerArgs> parse_worker_args(int argc, char** argv);

// Connects to the driver, joins the ring and serves tasks until Shutdown.
// Returns the process exit code.
int worker_main(const WorkerArgs& args);

// Convenience for executables that double as workers: returns an exit code
// when argv selects worker mode.
std::optional<int> maybe_run_worker(int argc, char** argv);

}  // namespace shardpipe
