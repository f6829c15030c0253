#include "shardpipe/socket.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <thread>
#include <vector>

namespace shardpipe {

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

int remaining_ms(Deadline deadline) {
  if (!deadline) return -1;
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - Clock::now());
  return left.count() <= 0 ? 0 : static_cast<int>(std::min<long long>(left.count(), 1 << 30));
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host.empty() || host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    return addr;
  }
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw ClusterError("cannot resolve host '" + host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

void Socket::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_both() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::send_all(std::span<const std::byte> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EPIPE || errno == ECONNRESET) throw ConnectionClosed(errno_text("send"));
      throw ClusterError(errno_text("send"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

void Socket::send_frame(MsgType type, std::span<const std::byte> payload) {
  send_all(encode_frame(type, payload));
}

bool Socket::wait_readable(std::chrono::milliseconds timeout) const {
  pollfd p{fd_, POLLIN, 0};
  for (;;) {
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) throw ClusterError(errno_text("poll"));
    return rc > 0;
  }
}

void Socket::recv_exact(std::span<std::byte> out, Deadline deadline) {
  std::size_t got = 0;
  while (got < out.size()) {
    if (deadline) {
      pollfd p{fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      if (rc < 0) throw ClusterError(errno_text("poll"));
      if (rc == 0) throw TimeoutError("timed out waiting for peer data");
    }
    const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
    if (n == 0) throw ConnectionClosed("peer closed the connection");
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == ECONNRESET || errno == EBADF || errno == ENOTCONN) {
        throw ConnectionClosed(errno_text("recv"));
      }
      throw ClusterError(errno_text("recv"));
    }
    got += static_cast<std::size_t>(n);
  }
}

Frame Socket::recv_frame(Deadline deadline) {
  std::array<std::byte, kFrameHeaderSize> header;
  recv_exact(header, deadline);
  const FrameHeader h = decode_header(header);
  Frame f{h.type, Bytes(h.length)};
  recv_exact(f.payload, deadline);
  return f;
}

Listener Listener::bind(const std::string& host, std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw ClusterError(errno_text("socket"));
  Listener l;
  l.sock_ = Socket(fd);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(host, port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    throw ClusterError(errno_text(("bind " + host + ":" + std::to_string(port)).c_str()));
  }
  if (::listen(fd, 128) < 0) throw ClusterError(errno_text("listen"));
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  l.port_ = ntohs(addr.sin_port);
  return l;
}

Socket Listener::accept(Deadline deadline) {
  for (;;) {
    pollfd p{sock_.fd(), POLLIN, 0};
    const int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) throw ClusterError(errno_text("poll"));
    if (rc == 0) throw TimeoutError("timed out waiting for a connection");
    const int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) continue;
      throw ClusterError(errno_text("accept"));
    }
    set_nodelay(fd);
    return Socket(fd);
  }
}

Socket connect_tcp(const std::string& host, std::uint16_t port, Deadline deadline) {
  const sockaddr_in addr = resolve(host, port);
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw ClusterError(errno_text("socket"));
    Socket s(fd);
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      set_nodelay(fd);
      return s;
    }
    const int err = errno;
    if (err != ECONNREFUSED && err != EINTR && err != ETIMEDOUT && err != EAGAIN) {
      errno = err;
      throw ClusterError(errno_text(("connect " + host + ":" + std::to_string(port)).c_str()));
    }
    if (deadline && Clock::now() >= *deadline) {
      throw TimeoutError("could not connect to " + host + ":" + std::to_string(port));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

Frame exchange_frames(Socket& to, std::span<const std::byte> out, Socket& from,
                      const Socket* watch, const std::function<void()>& on_watch) {
  const Bytes frame = encode_frame(MsgType::AllreduceChunk, out);
  std::size_t sent = 0;

  std::array<std::byte, kFrameHeaderSize> header{};
  std::size_t header_got = 0;
  Bytes payload;
  std::size_t payload_got = 0;
  std::optional<FrameHeader> h;

  auto recv_done = [&] { return h && payload_got == h->length; };

  while (sent < frame.size() || !recv_done()) {
    std::vector<pollfd> fds;
    if (sent < frame.size()) fds.push_back({to.fd(), POLLOUT, 0});
    const std::size_t recv_slot = fds.size();
    if (!recv_done()) fds.push_back({from.fd(), POLLIN, 0});
    const std::size_t watch_slot = fds.size();
    if (watch != nullptr) fds.push_back({watch->fd(), POLLIN, 0});

    const int rc = ::poll(fds.data(), fds.size(), -1);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw ClusterError(errno_text("poll"));
    }
    if (watch != nullptr && fds[watch_slot].revents != 0 && on_watch) on_watch();

    if (sent < frame.size() && fds[0].revents != 0) {
      const ssize_t n = ::send(to.fd(), frame.data() + sent, frame.size() - sent,
                               MSG_NOSIGNAL | MSG_DONTWAIT);
      if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
        throw ConnectionClosed(errno_text("ring send"));
      }
      if (n > 0) sent += static_cast<std::size_t>(n);
    }

    if (!recv_done() && fds[recv_slot].revents != 0) {
      std::byte* dst;
      std::size_t want;
      if (!h) {
        dst = header.data() + header_got;
        want = kFrameHeaderSize - header_got;
      } else {
        dst = payload.data() + payload_got;
        want = h->length - payload_got;
      }
      const ssize_t n = ::recv(from.fd(), dst, want, MSG_DONTWAIT);
      if (n == 0) throw ConnectionClosed("ring peer closed the connection");
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
        throw ConnectionClosed(errno_text("ring recv"));
      }
      if (!h) {
        header_got += static_cast<std::size_t>(n);
        if (header_got == kFrameHeaderSize) {
          h = decode_header(header);
          if (h->type != MsgType::AllreduceChunk) {
            throw ProtocolError("expected AllreduceChunk on ring, got " +
                                std::string(to_string(h->type)));
          }
          payload.resize(h->length);
        }
      } else {
        payload_got += static_cast<std::size_t>(n);
      }
    }
  }
  return {MsgType::AllreduceChunk, std::move(payload)};
}

std::pair<std::string, std::uint16_t> split_host_port(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ClusterError("expected host:port, got '" + address + "'");
  }
  unsigned port = 0;
  const char* b = address.data() + colon + 1;
  const char* e = address.data() + address.size();
  const auto [ptr, ec] = std::from_chars(b, e, port);
  if (ec != std::errc() || ptr != e || port > 65535) {
    throw ClusterError("bad port in '" + address + "'");
  }
  return {address.substr(0, colon), static_cast<std::uint16_t>(port)};
}

}  // namespace shardpipe
