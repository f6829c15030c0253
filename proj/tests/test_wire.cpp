#include <gtest/gtest.h>

#include <sys/socket.h>

#include <thread>

#include "shardpipe/errors.hpp"
#include "shardpipe/socket.hpp"
#include "shardpipe/wire.hpp"

using namespace shardpipe;

namespace {

Bytes bytes_of(std::initializer_list<int> v) {
  Bytes b;
  for (int x : v) b.push_back(static_cast<std::byte>(x));
  return b;
}

std::pair<Socket, Socket> socket_pair() {
  int fds[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) throw std::runtime_error("socketpair");
  return {Socket(fds[0]), Socket(fds[1])};
}

}  // namespace

TEST(Frame, HeaderLayout) {
  const Bytes f = encode_frame(MsgType::TaskRun, bytes_of({7, 8, 9}));
  ASSERT_EQ(f.size(), kFrameHeaderSize + 3);
  EXPECT_EQ(f[0], std::byte{'S'});
  EXPECT_EQ(f[3], std::byte{'1'});
  EXPECT_EQ(f[4], std::byte{3});
  EXPECT_EQ(f[5], std::byte{0});
  EXPECT_EQ(f[8], std::byte{7});
  EXPECT_EQ(f[9], std::byte{7});
}

TEST(Frame, EveryTypeRoundTrips) {
  for (std::uint8_t t = 0; t <= kMaxMsgType; ++t) {
    const Frame f{static_cast<MsgType>(t), bytes_of({t, 1, 2})};
    EXPECT_EQ(decode_frame(encode_frame(f)), f) << to_string(f.type);
  }
  EXPECT_EQ(decode_frame(encode_frame(Frame{MsgType::Shutdown, {}})), (Frame{MsgType::Shutdown, {}}));
}

TEST(Frame, RejectsCorruption) {
  Bytes f = encode_frame(MsgType::Heartbeat, bytes_of({1}));
  Bytes bad = f;
  bad[0] = std::byte{'X'};
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  bad = f;
  bad[8] = std::byte{kMaxMsgType + 1};
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  bad = f;
  bad.pop_back();
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  bad = f;
  bad[7] = std::byte{0x7f};  // length far above the bound
  EXPECT_THROW(decode_header(std::span(bad.data(), kFrameHeaderSize)), ProtocolError);
}

TEST(Payloads, RoundTrip) {
  const HelloMsg h{3, 40000, 1234};
  const HelloMsg hb = decode_hello(encode(h));
  EXPECT_EQ(hb.worker_id, 3u);
  EXPECT_EQ(hb.ring_port, 40000u);
  EXPECT_EQ(hb.pid, 1234u);

  const HelloAckMsg a{1, 4, "127.0.0.1", 5555};
  const HelloAckMsg ab = decode_hello_ack(encode(a));
  EXPECT_EQ(ab.successor_host, "127.0.0.1");
  EXPECT_EQ(ab.successor_port, 5555u);
  EXPECT_EQ(ab.n_workers, 4u);

  const TaskRunMsg r{99, "echo", bytes_of({1, 2})};
  const TaskRunMsg rb = decode_task_run(encode(r));
  EXPECT_EQ(rb.seq, 99u);
  EXPECT_EQ(rb.task, "echo");
  EXPECT_EQ(rb.args, r.args);

  const TaskResultMsg res{5, bytes_of({9})};
  EXPECT_EQ(decode_task_result(encode(res)).result, res.result);

  const ErrorMsg e{6, "boom"};
  EXPECT_EQ(decode_error(encode(e)).message, "boom");

  const AllreduceChunkMsg c{2, 1, 10, {0.5, -1.25, 1e300}};
  const AllreduceChunkMsg cb = decode_allreduce_chunk(encode(c));
  EXPECT_EQ(cb.step, 2u);
  EXPECT_EQ(cb.chunk, 1u);
  EXPECT_EQ(cb.total_length, 10u);
  EXPECT_EQ(cb.values, c.values);

  Bytes trailing = encode(e);
  trailing.push_back(std::byte{0});
  EXPECT_THROW(decode_error(trailing), ProtocolError);
  Bytes truncated = encode(r);
  truncated.pop_back();
  EXPECT_THROW(decode_task_run(truncated), ProtocolError);
}

TEST(Socket, FramesCrossAStream) {
  auto [a, b] = socket_pair();
  const Bytes big(100000, std::byte{0x5a});
  std::thread sender([&] {
    a.send_frame(MsgType::Broadcast, big);
    a.send_frame(MsgType::Heartbeat);
    a.close();
  });
  const Frame f1 = b.recv_frame();
  EXPECT_EQ(f1.type, MsgType::Broadcast);
  EXPECT_EQ(f1.payload, big);
  EXPECT_EQ(b.recv_frame().type, MsgType::Heartbeat);
  sender.join();
  EXPECT_THROW(b.recv_frame(), ConnectionClosed);
}

TEST(Socket, DeadlineAndGarbage) {
  auto [a, b] = socket_pair();
  EXPECT_THROW(b.recv_frame(Clock::now() + std::chrono::milliseconds(50)), TimeoutError);
  a.send_all(bytes_of({'N', 'O', 'P', 'E', 0, 0, 0, 0, 0}));
  EXPECT_THROW(b.recv_frame(), ProtocolError);
}

TEST(Socket, MidFrameEofIsConnectionClosed) {
  auto [a, b] = socket_pair();
  Bytes f = encode_frame(MsgType::TaskResult, bytes_of({1, 2, 3, 4}));
  f.resize(f.size() - 2);
  a.send_all(f);
  a.close();
  EXPECT_THROW(b.recv_frame(), ConnectionClosed);
}

TEST(Socket, HostPort) {
  EXPECT_EQ(split_host_port("127.0.0.1:8080"), (std::pair<std::string, std::uint16_t>{"127.0.0.1", 8080}));
  EXPECT_THROW(split_host_port("nohost"), ClusterError);
  EXPECT_THROW(split_host_port("h:99999"), ClusterError);
  EXPECT_THROW(split_host_port("h:abc"), ClusterError);
}

TEST(Socket, TcpListenAndConnect) {
  Listener l = Listener::bind("127.0.0.1", 0);
  ASSERT_NE(l.port(), 0);
  std::thread client([&] {
    Socket s = connect_tcp("127.0.0.1", l.port(), Clock::now() + std::chrono::seconds(5));
    s.send_frame(MsgType::Barrier);
  });
  Socket server = l.accept(Clock::now() + std::chrono::seconds(5));
  EXPECT_EQ(server.recv_frame().type, MsgType::Barrier);
  client.join();
  EXPECT_THROW(l.accept(Clock::now() + std::chrono::milliseconds(50)), TimeoutError);
}
