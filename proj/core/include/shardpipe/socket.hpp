#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "shardpipe/errors.hpp"
#include "shardpipe/wire.hpp"

namespace shardpipe {

class ConnectionClosed : public ClusterError {
 public:
  using ClusterError::ClusterError;
};

class TimeoutError : public ClusterError {
 public:
  using ClusterError::ClusterError;
};

using Clock = std::chrono::steady_clock;
using Deadline = std::optional<Clock::time_point>;

// Owning TCP socket. Sends use MSG_NOSIGNAL, so a dead peer surfaces as
// ConnectionClosed rather than SIGPIPE.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept;
  // Wakes any thread blocked reading this socket without releasing the fd.
  void shutdown_both() noexcept;

  void send_all(std::span<const std::byte> data);
  void send_frame(MsgType type, std::span<const std::byte> payload = {});

  // Blocks for one whole frame. EOF before the first byte or mid-frame throws
  // ConnectionClosed; a passed deadline throws TimeoutError; a malformed
  // header throws ProtocolError.
  Frame recv_frame(Deadline deadline = std::nullopt);

  // poll() for readability; false on timeout.
  bool wait_readable(std::chrono::milliseconds timeout) const;

 private:
  void recv_exact(std::span<std::byte> out, Deadline deadline);
  int fd_ = -1;
};

class Listener {
 public:
  // port 0 picks an ephemeral port.
  static Listener bind(const std::string& host, std::uint16_t port);

  std::uint16_t port() const noexcept { return port_; }
  int fd() const noexcept { return sock_.fd(); }
  Socket accept(Deadline deadline);
  void close() noexcept { sock_.close(); }

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

// Retries refused connections until the deadline.
Socket connect_tcp(const std::string& host, std::uint16_t port, Deadline deadline);

// Sends `out` on `to` while receiving one frame from `from`, without either
// side blocking the other (ring peers send and receive simultaneously). When
// `watch` becomes readable, `on_watch` is invoked; it is expected to throw or
// exit if the ring step must be abandoned.
Frame exchange_frames(Socket& to, std::span<const std::byte> out, Socket& from,
                      const Socket* watch = nullptr, const std::function<void()>& on_watch = {});

// "host:port" → parts. Throws ClusterError on malformed input.
std::pair<std::string, std::uint16_t> split_host_port(const std::string& address);

}  // namespace shardpipe
