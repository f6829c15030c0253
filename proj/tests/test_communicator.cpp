#include <gtest/gtest.h>

#include <sys/socket.h>

#include <random>
#include <thread>

#include "oracles.hpp"
#include "shardpipe/communicator.hpp"
#include "shardpipe/errors.hpp"

using namespace shardpipe;

namespace {

struct RingResult {
  std::vector<std::vector<float>> out;
  std::vector<std::size_t> rounds;
  std::vector<std::string> errors;
};

// n threads joined in a ring by socketpairs: link i carries rank i to rank
// (i + 1) mod n.
RingResult run_ring(const std::vector<std::vector<float>>& inputs, ReduceOp op) {
  const int n = static_cast<int>(inputs.size());
  std::vector<RingLinks> links(n);
  for (int i = 0; i < n; ++i) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) throw std::runtime_error("socketpair");
    links[i].to_successor = Socket(fds[0]);
    links[(i + 1) % n].from_predecessor = Socket(fds[1]);
  }
  RingResult r{std::vector<std::vector<float>>(n), std::vector<std::size_t>(n), std::vector<std::string>(n)};
  std::vector<std::thread> threads;
  for (int i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      try {
        r.out[i] = ring_allreduce(links[i], i, n, inputs[i], op, {}, &r.rounds[i]);
      } catch (const std::exception& e) {
        r.errors[i] = e.what();
        links[i].to_successor.shutdown_both();
        links[i].from_predecessor.shutdown_both();
      }
    });
  }
  for (auto& t : threads) t.join();
  return r;
}

}  // namespace

TEST(Chunks, BalancedLargerFirst) {
  EXPECT_EQ(ring_chunk(10, 4, 0).begin, 0u);
  EXPECT_EQ(ring_chunk(10, 4, 0).end, 3u);
  EXPECT_EQ(ring_chunk(10, 4, 1).end, 6u);
  EXPECT_EQ(ring_chunk(10, 4, 2).end, 8u);
  EXPECT_EQ(ring_chunk(10, 4, 3).end, 10u);
  EXPECT_EQ(ring_chunk(2, 4, 3).begin, ring_chunk(2, 4, 3).end);
}

TEST(LocalComm, Identity) {
  LocalCommunicator c;
  const std::vector<float> v = {1, 2, 3};
  EXPECT_EQ(c.allreduce(v, ReduceOp::Sum), v);
  EXPECT_EQ(c.allreduce(v, ReduceOp::Mean), v);
  EXPECT_EQ(c.last_rounds(), 0u);
}

TEST(Ring, SumExampleAndRounds) {
  const RingResult r = run_ring({{1, 2}, {3, 4}, {5, 6}}, ReduceOp::Sum);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(r.errors[i], "");
    EXPECT_EQ(r.out[i], (std::vector<float>{9, 12}));
    EXPECT_EQ(r.rounds[i], 4u);
  }
}

TEST(Ring, MeanExample) {
  const RingResult r = run_ring({{1, 10}, {3, 20}, {5, 30}, {7, 40}}, ReduceOp::Mean);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.out[i], (std::vector<float>{4, 25}));
}

TEST(Ring, MatchesSerialSumOnRandomInputs) {
  std::mt19937 rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 5);
    const std::size_t len = rng() % 40;  // includes lengths shorter than n
    std::normal_distribution<float> d(0.0f, 100.0f);
    std::vector<std::vector<float>> inputs(n, std::vector<float>(len));
    for (auto& v : inputs) {
      for (float& x : v) x = d(rng);
    }
    const auto want = oracle::serial_sum(inputs);
    const RingResult sum = run_ring(inputs, ReduceOp::Sum);
    const RingResult mean = run_ring(inputs, ReduceOp::Mean);
    for (int i = 0; i < n; ++i) {
      ASSERT_EQ(sum.errors[i], "");
      EXPECT_EQ(sum.rounds[i], 2u * (n - 1));
      EXPECT_EQ(sum.out[i], sum.out[0]) << "replicas differ";
      EXPECT_EQ(mean.out[i], mean.out[0]);
      ASSERT_EQ(sum.out[i].size(), len);
      for (std::size_t k = 0; k < len; ++k) {
        EXPECT_TRUE(oracle::close_rel(sum.out[i][k], want[k], 1e-6, 1e-4));
        EXPECT_TRUE(oracle::close_rel(mean.out[i][k], want[k] / n, 1e-6, 1e-4));
      }
    }
  }
}

TEST(Ring, LengthMismatchIsProtocolError) {
  const RingResult r = run_ring({{1, 2, 3}, {1, 2}}, ReduceOp::Sum);
  bool protocol = false;
  for (const auto& e : r.errors) protocol |= e.find("length") != std::string::npos;
  EXPECT_TRUE(protocol) << r.errors[0] << " | " << r.errors[1];
}
