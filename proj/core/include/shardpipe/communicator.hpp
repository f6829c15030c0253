#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "shardpipe/socket.hpp"

namespace shardpipe {

enum class ReduceOp { Sum, Mean };

// Worker-side collectives. Every participant must make the same sequence of
// calls; allreduce additionally requires equal vector lengths.
class Communicator {
 public:
  virtual ~Communicator() = default;

  virtual int rank() const = 0;
  virtual int size() const = 0;
  virtual std::vector<float> allreduce(std::span<const float> local, ReduceOp op) = 0;
  virtual void barrier() = 0;

  // Communication rounds performed by the most recent allreduce.
  std::size_t last_rounds() const noexcept { return last_rounds_; }

 protected:
  std::size_t last_rounds_ = 0;
};

// Single participant: every collective is the identity.
class LocalCommunicator final : public Communicator {
 public:
  int rank() const override { return 0; }
  int size() const override { return 1; }
  std::vector<float> allreduce(std::span<const float> local, ReduceOp op) override;
  void barrier() override {}
};

// The two ring connections of one participant.
struct RingLinks {
  Socket to_successor;
  Socket from_predecessor;
};

// Chunk c of a length-`len` vector split n ways: contiguous, sizes differ by at
// most one, larger chunks first.
struct ChunkRange {
  std::size_t begin;
  std::size_t end;
};
ChunkRange ring_chunk(std::size_t len, std::size_t n, std::size_t c);

struct RingOptions {
  // Polled alongside ring traffic; see exchange_frames.
  const Socket* watch = nullptr;
  std::function<void()> on_watch;
};

// Ring allreduce: n-1 reduce-scatter steps then n-1 allgather steps. Partial
// sums travel as float64 and each chunk's final value is produced once by its
// owner, so every participant returns byte-identical floats. `rounds` (if
// given) receives the number of exchange steps performed, 2(n-1).
std::vector<float> ring_allreduce(RingLinks& links, int rank, int size,
                                  std::span<const float> local, ReduceOp op,
                                  const RingOptions& opts = {}, std::size_t* rounds = nullptr);

}  // namespace shardpipe
