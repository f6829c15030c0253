#include "shardpipe/worker.hpp"

#include <signal.h>
#include <unistd.h>

#include <atomic>
#include <charconv>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "shardpipe/errors.hpp"
#include "shardpipe/log.hpp"
#include "shardpipe/socket.hpp"
#include "task_table.hpp"

namespace shardpipe {

TaskRegistry::TaskRegistry() { register_builtin_tasks(*this); }

TaskRegistry& TaskRegistry::instance() {
  static TaskRegistry registry;
  return registry;
}

void TaskRegistry::add(const std::string& name, TaskFn fn) {
  if (!tasks_.emplace(name, std::move(fn)).second) {
    throw Error("task '" + name + "' is already registered");
  }
}

const TaskFn* TaskRegistry::find(const std::string& name) const {
  const auto it = tasks_.find(name);
  return it == tasks_.end() ? nullptr : &it->second;
}

std::vector<std::string> TaskRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, fn] : tasks_) out.push_back(name);
  return out;
}

Bytes TaskRegistry::run(const std::string& name, TaskContext& ctx,
                        std::span<const std::byte> args) const {
  const TaskFn* fn = find(name);
  if (fn == nullptr) throw Error("unknown task '" + name + "'");
  return (*fn)(ctx, args);
}

namespace {

int parse_int(const char* s, const char* what) {
  int v = 0;
  const char* end = s + std::strlen(s);
  const auto [ptr, ec] = std::from_chars(s, end, v);
  if (ec != std::errc() || ptr != end) throw ClusterError(std::string("bad ") + what + " '" + s + "'");
  return v;
}

// Driver connection shared by the control loop and the heartbeat thread.
class DriverLink {
 public:
  explicit DriverLink(Socket s) : sock_(std::move(s)) {}

  void send(MsgType type, std::span<const std::byte> payload = {}) {
    std::lock_guard lock(send_mu_);
    sock_.send_frame(type, payload);
  }
  Frame recv(Deadline deadline = std::nullopt) { return sock_.recv_frame(deadline); }
  Socket& socket() noexcept { return sock_; }

 private:
  Socket sock_;
  std::mutex send_mu_;
};

// Reads one frame from the driver while a collective is in flight. Only
// Shutdown (or a vanished driver) can legitimately arrive then, and either
// ends the process at once.
[[noreturn]] void abandon_for_driver(DriverLink& driver) {
  try {
    const Frame f = driver.recv();
    if (f.type == MsgType::Shutdown) {
      spdlog::debug("shutdown received mid-collective");
      std::_Exit(0);
    }
    spdlog::error("unexpected {} frame during a collective", to_string(f.type));
  } catch (const std::exception& e) {
    spdlog::warn("driver connection lost: {}", e.what());
  }
  std::_Exit(1);
}

class RingCommunicator final : public Communicator {
 public:
  RingCommunicator(int rank, int size, RingLinks links, DriverLink& driver)
      : rank_(rank), size_(size), links_(std::move(links)), driver_(driver) {}

  int rank() const override { return rank_; }
  int size() const override { return size_; }

  std::vector<float> allreduce(std::span<const float> local, ReduceOp op) override {
    if (broken_) throw ClusterError("ring is broken after an earlier failure; relaunch the cluster");
    RingOptions opts;
    opts.watch = &driver_.socket();
    opts.on_watch = [this] { abandon_for_driver(driver_); };
    try {
      return ring_allreduce(links_, rank_, size_, local, op, opts, &last_rounds_);
    } catch (...) {
      break_ring();
      throw;
    }
  }

  void barrier() override {
    driver_.send(MsgType::Barrier);
    for (;;) {
      const Frame f = driver_.recv();
      if (f.type == MsgType::BarrierRelease) return;
      if (f.type == MsgType::Shutdown) {
        spdlog::debug("shutdown received inside barrier");
        std::_Exit(0);
      }
      throw ProtocolError("expected BarrierRelease, got " + std::string(to_string(f.type)));
    }
  }

  // Peers blocked on us see EOF and fail in turn instead of hanging.
  void break_ring() noexcept {
    broken_ = true;
    links_.to_successor.shutdown_both();
    links_.from_predecessor.shutdown_both();
  }

 private:
  int rank_;
  int size_;
  RingLinks links_;
  DriverLink& driver_;
  bool broken_ = false;
};

class Heartbeat {
 public:
  Heartbeat(DriverLink& driver, std::chrono::milliseconds interval)
      : driver_(driver), interval_(interval), thread_([this] { loop(); }) {}
  ~Heartbeat() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

 private:
  void loop() {
    std::unique_lock lock(mu_);
    while (!cv_.wait_for(lock, interval_, [this] { return stop_; })) {
      try {
        driver_.send(MsgType::Heartbeat);
      } catch (const std::exception&) {
        return;
      }
    }
  }

  DriverLink& driver_;
  std::chrono::milliseconds interval_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace

std::optional<WorkerArgs> parse_worker_args(int argc, char** argv) {
  bool worker = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--worker") == 0) worker = true;
  }
  if (!worker) return std::nullopt;

  WorkerArgs a;
  bool have_id = false;
  bool have_driver = false;
  for (int i = 1; i < argc; ++i) {
    const std::string_view flag = argv[i];
    auto value = [&]() -> const char* {
      if (i + 1 >= argc) throw ClusterError("missing value for " + std::string(flag));
      return argv[++i];
    };
    if (flag == "--worker") continue;
    if (flag == "--id") {
      a.id = parse_int(value(), "worker id");
      have_id = true;
    } else if (flag == "--driver") {
      auto [host, port] = split_host_port(value());
      a.driver_host = host;
      a.driver_port = port;
      have_driver = true;
    } else if (flag == "--timeout") {
      a.timeout_s = std::stod(value());
    } else if (flag == "--heartbeat-ms") {
      a.heartbeat_ms = parse_int(value(), "heartbeat interval");
    }
  }
  if (!have_id || !have_driver) throw ClusterError("worker mode needs --id and --driver");
  return a;
}

int worker_main(const WorkerArgs& args) {
  init_logging();
  // Ctrl-C reaches the whole process group; the driver decides when we stop.
  ::signal(SIGINT, SIG_IGN);
  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                           std::chrono::duration<double>(args.timeout_s));
  try {
    Listener ring_listener = Listener::bind(args.driver_host, 0);
    DriverLink driver(connect_tcp(args.driver_host, args.driver_port, deadline));
    driver.send(MsgType::Hello,
                encode(HelloMsg{static_cast<std::uint32_t>(args.id), ring_listener.port(),
                                static_cast<std::uint32_t>(::getpid())}));

    const Frame ack_frame = driver.recv(deadline);
    if (ack_frame.type != MsgType::HelloAck) {
      throw ProtocolError("expected HelloAck, got " + std::string(to_string(ack_frame.type)));
    }
    const HelloAckMsg ack = decode_hello_ack(ack_frame.payload);
    if (ack.worker_id != static_cast<std::uint32_t>(args.id)) {
      throw ProtocolError("HelloAck addressed to worker " + std::to_string(ack.worker_id));
    }

    WorkerState state;
    state.id = args.id;
    state.n_workers = static_cast<int>(ack.n_workers);

    RingLinks links;
    if (ack.n_workers > 1) {
      links.to_successor = connect_tcp(ack.successor_host,
                                       static_cast<std::uint16_t>(ack.successor_port), deadline);
      links.from_predecessor = ring_listener.accept(deadline);
    }
    ring_listener.close();

    std::unique_ptr<Communicator> comm;
    RingCommunicator* ring = nullptr;
    if (ack.n_workers > 1) {
      auto rc = std::make_unique<RingCommunicator>(args.id, state.n_workers, std::move(links), driver);
      ring = rc.get();
      comm = std::move(rc);
    } else {
      comm = std::make_unique<LocalCommunicator>();
    }
    // Ring is up; the driver declares Ready once every worker gets here.
    comm->barrier();
    if (ack.n_workers == 1) {
      // LocalCommunicator::barrier is a no-op; the launch barrier still goes
      // through the driver.
      driver.send(MsgType::Barrier);
      const Frame f = driver.recv(deadline);
      if (f.type != MsgType::BarrierRelease) {
        throw ProtocolError("expected BarrierRelease, got " + std::string(to_string(f.type)));
      }
    }
    spdlog::debug("worker {} ready ({} workers)", args.id, ack.n_workers);

    Heartbeat heartbeat(driver, std::chrono::milliseconds(args.heartbeat_ms));
    TaskContext ctx{state, *comm};
    for (;;) {
      Frame f;
      try {
        f = driver.recv();
      } catch (const ConnectionClosed&) {
        spdlog::warn("worker {}: driver went away", args.id);
        return 1;
      }
      switch (f.type) {
        case MsgType::Shutdown:
          spdlog::debug("worker {} shutting down", args.id);
          return 0;
        case MsgType::Broadcast:
          state.broadcast = std::move(f.payload);
          break;
        case MsgType::Scatter:
          state.partition = decode_batch(f.payload);
          break;
        case MsgType::TaskRun: {
          const TaskRunMsg run = decode_task_run(f.payload);
          try {
            Bytes result = TaskRegistry::instance().run(run.task, ctx, run.args);
            driver.send(MsgType::TaskResult, encode(TaskResultMsg{run.seq, std::move(result)}));
          } catch (const std::exception& e) {
            spdlog::warn("worker {}: task '{}' failed: {}", args.id, run.task, e.what());
            if (ring != nullptr) ring->break_ring();
            driver.send(MsgType::Error, encode(ErrorMsg{run.seq, e.what()}));
          }
          break;
        }
        default:
          throw ProtocolError("worker received unexpected " + std::string(to_string(f.type)));
      }
    }
  } catch (const std::exception& e) {
    spdlog::error("worker {} failed: {}", args.id, e.what());
    return 1;
  }
}

std::optional<int> maybe_run_worker(int argc, char** argv) {
  std::optional<WorkerArgs> args;
  try {
    args = parse_worker_args(argc, argv);
  } catch (const std::exception& e) {
    init_logging();
    spdlog::error("{}", e.what());
    return 2;
  }
  if (!args) return std::nullopt;
  return worker_main(*args);
}

}  // namespace shardpipe
