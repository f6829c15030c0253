#include "shardpipe/cluster.hpp"

#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "shardpipe/log.hpp"
#include "shardpipe/socket.hpp"
#include "shardpipe/wire.hpp"

namespace shardpipe {

namespace {

std::atomic<bool> g_interrupt{false};
static_assert(std::atomic<bool>::is_always_lock_free);

constexpr auto kSlice = std::chrono::milliseconds(50);

Clock::duration seconds(double s) {
  return std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
}

std::string join_ids(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ", ";
    out += std::to_string(id);
  }
  return out;
}

std::string self_executable() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) throw ClusterError("cannot resolve /proc/self/exe: " + ec.message());
  return p.string();
}

pid_t spawn(const std::vector<std::string>& argv_strings) {
  std::vector<char*> argv;
  for (const auto& s : argv_strings) argv.push_back(const_cast<char*>(s.c_str()));
  argv.push_back(nullptr);
  const pid_t parent = ::getpid();
  const pid_t pid = ::fork();
  if (pid < 0) throw ClusterError(std::string("fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) ::_exit(1);
    ::execv(argv[0], argv.data());
    ::_exit(127);
  }
  return pid;
}

void kill_and_reap(const std::vector<pid_t>& pids) {
  for (pid_t p : pids) ::kill(p, SIGKILL);
  for (pid_t p : pids) {
    while (::waitpid(p, nullptr, 0) < 0 && errno == EINTR) {
    }
  }
}

}  // namespace

void request_interrupt() noexcept { g_interrupt.store(true); }
bool interrupt_requested() noexcept { return g_interrupt.load(); }
void clear_interrupt() noexcept { g_interrupt.store(false); }

void validate(const ClusterConfig& cfg) {
  if (cfg.n_workers == 0) throw ClusterError("n_workers must be at least 1");
  if (!(cfg.handshake_timeout_s > 0) || !(cfg.heartbeat_interval_s > 0) ||
      !(cfg.heartbeat_timeout_s > 0) || !(cfg.shutdown_grace_s >= 0)) {
    throw ClusterError("cluster timeouts must be positive");
  }
}

std::string_view to_string(ClusterState s) {
  switch (s) {
    case ClusterState::Launching: return "Launching";
    case ClusterState::Ready: return "Ready";
    case ClusterState::ShuttingDown: return "ShuttingDown";
    case ClusterState::Down: return "Down";
  }
  return "?";
}

LaunchError::LaunchError(const std::string& why, std::vector<int> missing)
    : ClusterError(why + (missing.empty() ? std::string() : "; missing workers: " + join_ids(missing))),
      missing_(std::move(missing)) {}

struct ClusterContext::Impl {
  struct Worker {
    int id = 0;
    pid_t pid = -1;
    Socket sock;
    std::mutex send_mu;
    bool alive = true;
    bool reaped = false;
    Clock::time_point last_heartbeat;
    std::thread reader;
  };

  ClusterConfig cfg;
  std::vector<std::unique_ptr<Worker>> workers;
  std::atomic<ClusterState> state{ClusterState::Launching};

  mutable std::mutex mu;
  std::condition_variable cv;
  std::vector<bool> barrier_arrived;
  std::size_t barrier_count = 0;
  std::uint64_t seq = 0;
  std::vector<std::optional<Bytes>> results;
  std::optional<std::pair<int, std::string>> task_error;
  std::optional<std::string> failure;  // set once; cluster unusable afterwards
  bool stopping = false;
  std::thread supervisor;

  void send(Worker& w, MsgType type, std::span<const std::byte> payload = {}) {
    std::lock_guard lock(w.send_mu);
    w.sock.send_frame(type, payload);
  }

  // Caller holds mu.
  void mark_dead(Worker& w, const std::string& why) {
    if (!w.alive) return;
    w.alive = false;
    if (!stopping) {
      spdlog::warn("worker {} marked dead: {}", w.id, why);
      if (!failure) failure = "worker " + std::to_string(w.id) + " died (" + why + ")";
    }
    cv.notify_all();
  }

  void on_frame(Worker& w, Frame f) {
    std::unique_lock lock(mu);
    switch (f.type) {
      case MsgType::Heartbeat:
        w.last_heartbeat = Clock::now();
        break;
      case MsgType::Barrier:
        if (!barrier_arrived[w.id]) {
          barrier_arrived[w.id] = true;
          ++barrier_count;
        }
        if (barrier_count == workers.size()) {
          std::fill(barrier_arrived.begin(), barrier_arrived.end(), false);
          barrier_count = 0;
          lock.unlock();
          for (auto& other : workers) {
            try {
              send(*other, MsgType::BarrierRelease);
            } catch (const std::exception& e) {
              spdlog::debug("barrier release to worker {} failed: {}", other->id, e.what());
            }
          }
        }
        break;
      case MsgType::TaskResult: {
        TaskResultMsg m = decode_task_result(f.payload);
        if (m.seq == seq) {
          results[w.id] = std::move(m.result);
          cv.notify_all();
        }
        break;
      }
      case MsgType::Error: {
        ErrorMsg m = decode_error(f.payload);
        if (m.seq == seq && !task_error) {
          task_error = {w.id, m.message};
          if (!failure) failure = "task failed on worker " + std::to_string(w.id);
          cv.notify_all();
        }
        break;
      }
      default:
        throw ProtocolError("driver received unexpected " + std::string(to_string(f.type)));
    }
  }

  void reader_loop(Worker& w) {
    try {
      for (;;) on_frame(w, w.sock.recv_frame());
    } catch (const std::exception& e) {
      std::lock_guard lock(mu);
      mark_dead(w, e.what());
    }
  }

  void supervisor_loop() {
    const auto timeout = seconds(cfg.heartbeat_timeout_s);
    std::unique_lock lock(mu);
    while (!cv.wait_for(lock, kSlice, [this] { return stopping; })) {
      const auto now = Clock::now();
      for (auto& w : workers) {
        if (!w->alive) continue;
        int status = 0;
        if (!w->reaped && ::waitpid(w->pid, &status, WNOHANG) == w->pid) {
          w->reaped = true;
          mark_dead(*w, WIFSIGNALED(status)
                            ? "killed by signal " + std::to_string(WTERMSIG(status))
                            : "exited with status " + std::to_string(WEXITSTATUS(status)));
        } else if (now - w->last_heartbeat > timeout) {
          mark_dead(*w, "heartbeat timeout");
        }
      }
    }
  }

  void require_usable() {
    if (interrupt_requested()) throw Interrupted();
    if (state.load() != ClusterState::Ready) {
      throw ClusterError("cluster is " + std::string(to_string(state.load())) + ", not Ready");
    }
    std::lock_guard lock(mu);
    if (failure) throw ClusterError("cluster unusable after an earlier failure: " + *failure);
  }

  void launch();
  void shutdown() noexcept;
  std::vector<Bytes> run(const std::string& name, const std::vector<Bytes>& args);
};

void ClusterContext::Impl::launch() {
  const std::size_t n = cfg.n_workers;
  const auto deadline = Clock::now() + seconds(cfg.handshake_timeout_s);
  Listener listener = Listener::bind(cfg.host, cfg.base_port);
  const std::string driver_addr =
      cfg.advertised_driver.value_or(cfg.host + ":" + std::to_string(listener.port()));
  const std::string exe = cfg.worker_executable.empty() ? self_executable() : cfg.worker_executable;
  const int heartbeat_ms = std::max(1, static_cast<int>(cfg.heartbeat_interval_s * 1000.0));

  std::vector<pid_t> pids;
  auto fail = [&](const std::string& why, std::vector<int> missing) {
    workers.clear();
    kill_and_reap(pids);
    state = ClusterState::Down;
    throw LaunchError(why, std::move(missing));
  };

  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> argv = {exe,
                                     "--worker",
                                     "--id",
                                     std::to_string(i),
                                     "--driver",
                                     driver_addr,
                                     "--timeout",
                                     std::to_string(cfg.handshake_timeout_s),
                                     "--heartbeat-ms",
                                     std::to_string(heartbeat_ms)};
    argv.insert(argv.end(), cfg.worker_extra_args.begin(), cfg.worker_extra_args.end());
    try {
      pids.push_back(spawn(argv));
    } catch (const std::exception& e) {
      std::vector<int> missing;
      for (std::size_t k = 0; k < n; ++k) missing.push_back(static_cast<int>(k));
      fail(e.what(), missing);
    }
    spdlog::debug("spawned worker {} as pid {}", i, pids.back());
  }

  workers.resize(n);
  std::vector<std::uint32_t> ring_ports(n, 0);
  auto missing_ids = [&] {
    std::vector<int> out;
    for (std::size_t k = 0; k < n; ++k) {
      if (!workers[k]) out.push_back(static_cast<int>(k));
    }
    return out;
  };

  std::size_t joined = 0;
  while (joined < n) {
    if (interrupt_requested()) fail("launch interrupted", missing_ids());
    if (Clock::now() >= deadline) fail("handshake timed out", missing_ids());
    for (std::size_t k = 0; k < n; ++k) {
      int status = 0;
      if (::waitpid(pids[k], &status, WNOHANG) == pids[k]) {
        pids.erase(pids.begin() + static_cast<std::ptrdiff_t>(k));
        fail("worker " + std::to_string(k) + " exited during the handshake", missing_ids());
      }
    }
    Socket sock;
    try {
      sock = listener.accept(std::min(deadline, Clock::now() + kSlice * 2));
    } catch (const TimeoutError&) {
      continue;
    }
    try {
      const Frame f = sock.recv_frame(deadline);
      if (f.type != MsgType::Hello) throw ProtocolError("expected Hello");
      const HelloMsg hello = decode_hello(f.payload);
      if (hello.worker_id >= n || workers[hello.worker_id]) {
        throw ProtocolError("unexpected worker id " + std::to_string(hello.worker_id));
      }
      auto w = std::make_unique<Worker>();
      w->id = static_cast<int>(hello.worker_id);
      w->pid = pids[hello.worker_id];
      w->sock = std::move(sock);
      ring_ports[hello.worker_id] = hello.ring_port;
      workers[hello.worker_id] = std::move(w);
      ++joined;
    } catch (const ClusterError& e) {
      fail(std::string("handshake failed: ") + e.what(), missing_ids());
    } catch (const ProtocolError& e) {
      fail(std::string("handshake failed: ") + e.what(), missing_ids());
    }
  }
  listener.close();

  try {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t succ = (i + 1) % n;
      HelloAckMsg ack{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(n), cfg.host,
                      ring_ports[succ]};
      send(*workers[i], MsgType::HelloAck, encode(ack));
    }
    // Every worker reports once its ring links are connected.
    for (auto& w : workers) {
      const Frame f = w->sock.recv_frame(deadline);
      if (f.type != MsgType::Barrier) {
        throw ProtocolError("expected ring-ready Barrier from worker " + std::to_string(w->id));
      }
    }
    for (auto& w : workers) send(*w, MsgType::BarrierRelease);
  } catch (const Error& e) {
    fail(std::string("ring setup failed: ") + e.what(), {});
  }

  barrier_arrived.assign(n, false);
  const auto now = Clock::now();
  for (auto& w : workers) {
    w->last_heartbeat = now;
    Worker* wp = w.get();
    w->reader = std::thread([this, wp] { reader_loop(*wp); });
  }
  supervisor = std::thread([this] { supervisor_loop(); });
  state = ClusterState::Ready;
  spdlog::info("cluster ready with {} workers", n);
}

void ClusterContext::Impl::shutdown() noexcept {
  const ClusterState s = state.load();
  if (s == ClusterState::Down || s == ClusterState::ShuttingDown) return;
  state = ClusterState::ShuttingDown;
  {
    std::lock_guard lock(mu);
    stopping = true;
  }
  cv.notify_all();
  if (supervisor.joinable()) supervisor.join();

  for (auto& w : workers) {
    try {
      send(*w, MsgType::Shutdown);
    } catch (const std::exception&) {
    }
  }

  const auto grace_end = Clock::now() + seconds(cfg.shutdown_grace_s);
  for (;;) {
    bool pending = false;
    for (auto& w : workers) {
      if (w->reaped) continue;
      if (::waitpid(w->pid, nullptr, WNOHANG) == w->pid) {
        w->reaped = true;
      } else {
        pending = true;
      }
    }
    if (!pending || Clock::now() >= grace_end) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  for (auto& w : workers) {
    if (w->reaped) continue;
    spdlog::warn("worker {} (pid {}) ignored shutdown; killing", w->id, w->pid);
    ::kill(w->pid, SIGKILL);
    while (::waitpid(w->pid, nullptr, 0) < 0 && errno == EINTR) {
    }
    w->reaped = true;
  }

  for (auto& w : workers) w->sock.shutdown_both();
  for (auto& w : workers) {
    if (w->reader.joinable()) w->reader.join();
  }
  state = ClusterState::Down;
}

std::vector<Bytes> ClusterContext::Impl::run(const std::string& name, const std::vector<Bytes>& args) {
  require_usable();
  std::uint64_t my_seq = 0;
  {
    std::lock_guard lock(mu);
    my_seq = ++seq;
    results.assign(workers.size(), std::nullopt);
    task_error.reset();
  }
  for (auto& w : workers) {
    try {
      send(*w, MsgType::TaskRun, encode(TaskRunMsg{my_seq, name, args[w->id]}));
    } catch (const std::exception& e) {
      std::lock_guard lock(mu);
      mark_dead(*w, e.what());
    }
  }

  std::unique_lock lock(mu);
  for (;;) {
    if (task_error) throw TaskError(task_error->first, task_error->second);
    for (auto& w : workers) {
      if (!w->alive) {
        throw ClusterError("worker " + std::to_string(w->id) + " died while running '" + name +
                           "'" + (failure ? ": " + *failure : std::string()));
      }
    }
    if (std::all_of(results.begin(), results.end(), [](const auto& r) { return r.has_value(); })) {
      break;
    }
    if (interrupt_requested()) {
      if (!failure) failure = "interrupted during '" + name + "'";
      throw Interrupted();
    }
    cv.wait_for(lock, kSlice);
  }
  std::vector<Bytes> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

ClusterContext::ClusterContext(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

ClusterContext::~ClusterContext() { shutdown(); }

std::unique_ptr<ClusterContext> ClusterContext::launch(const ClusterConfig& cfg) {
  init_logging();
  validate(cfg);
  auto impl = std::make_unique<Impl>();
  impl->cfg = cfg;
  impl->launch();
  return std::unique_ptr<ClusterContext>(new ClusterContext(std::move(impl)));
}

void ClusterContext::shutdown() noexcept {
  if (impl_) impl_->shutdown();
}

ClusterState ClusterContext::state() const noexcept { return impl_->state.load(); }

std::size_t ClusterContext::size() const noexcept { return impl_->workers.size(); }

std::vector<int> ClusterContext::worker_pids() const {
  std::vector<int> out;
  for (const auto& w : impl_->workers) out.push_back(w->pid);
  return out;
}

std::vector<WorkerStatus> ClusterContext::status() const {
  std::lock_guard lock(impl_->mu);
  const auto now = Clock::now();
  std::vector<WorkerStatus> out;
  for (const auto& w : impl_->workers) {
    out.push_back({w->id, w->pid, w->alive,
                   std::chrono::duration_cast<std::chrono::milliseconds>(now - w->last_heartbeat)});
  }
  return out;
}

void ClusterContext::barrier() { run_task("barrier"); }

void ClusterContext::broadcast(std::span<const std::byte> payload) {
  impl_->require_usable();
  for (auto& w : impl_->workers) impl_->send(*w, MsgType::Broadcast, payload);
}

void ClusterContext::scatter_shards(const Shards& s) {
  impl_->require_usable();
  if (s.num_partitions() != size()) {
    throw DataError("scatter needs one partition per worker: got " +
                    std::to_string(s.num_partitions()) + " partitions for " +
                    std::to_string(size()) + " workers; repartition the shards first");
  }
  for (auto& w : impl_->workers) {
    impl_->send(*w, MsgType::Scatter, encode_batch(s.partition(static_cast<std::size_t>(w->id))));
  }
}

std::vector<Bytes> ClusterContext::run_task(const std::string& name, std::span<const std::byte> args) {
  return impl_->run(name, std::vector<Bytes>(size(), Bytes(args.begin(), args.end())));
}

std::vector<Bytes> ClusterContext::run_task_per_worker(const std::string& name,
                                                       const std::vector<Bytes>& args) {
  if (args.size() != size()) {
    throw ClusterError("run_task_per_worker needs " + std::to_string(size()) + " argument payloads, got " +
                       std::to_string(args.size()));
  }
  return impl_->run(name, args);
}

}  // namespace shardpipe
