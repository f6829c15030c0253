#include "shardpipe/communicator.hpp"

#include "shardpipe/thread_pool.hpp"

namespace shardpipe {

std::vector<float> LocalCommunicator::allreduce(std::span<const float> local, ReduceOp) {
  last_rounds_ = 0;
  return {local.begin(), local.end()};
}

ChunkRange ring_chunk(std::size_t len, std::size_t n, std::size_t c) {
  const Range r = balanced_range(len, n, c);
  return {r.begin, r.end};
}

std::vector<float> ring_allreduce(RingLinks& links, int rank, int size,
                                  std::span<const float> local, ReduceOp op,
                                  const RingOptions& opts, std::size_t* rounds) {
  const auto n = static_cast<std::size_t>(size);
  const auto r = static_cast<std::size_t>(rank);
  const std::size_t len = local.size();
  std::vector<double> acc(local.begin(), local.end());
  std::size_t steps = 0;

  auto send_recv = [&](std::uint32_t step, std::size_t send_chunk, std::size_t recv_chunk) {
    const ChunkRange s = ring_chunk(len, n, send_chunk);
    AllreduceChunkMsg out;
    out.step = step;
    out.chunk = static_cast<std::uint32_t>(send_chunk);
    out.total_length = len;
    out.values.assign(acc.begin() + static_cast<std::ptrdiff_t>(s.begin),
                      acc.begin() + static_cast<std::ptrdiff_t>(s.end));
    const Frame f = exchange_frames(links.to_successor, encode(out), links.from_predecessor,
                                    opts.watch, opts.on_watch);
    AllreduceChunkMsg in = decode_allreduce_chunk(f.payload);
    const ChunkRange want = ring_chunk(len, n, recv_chunk);
    if (in.total_length != len || in.step != step || in.chunk != recv_chunk ||
        in.values.size() != want.end - want.begin) {
      throw ProtocolError("allreduce length mismatch: local vector has " + std::to_string(len) +
                          " elements, peer sent " + std::to_string(in.total_length) +
                          " (step " + std::to_string(in.step) + ", chunk " +
                          std::to_string(in.chunk) + ")");
    }
    ++steps;
    return std::pair{want, std::move(in.values)};
  };

  if (n > 1) {
    for (std::size_t s = 0; s + 1 < n; ++s) {
      const std::size_t send_c = (r + n - s) % n;
      const std::size_t recv_c = (r + 2 * n - s - 1) % n;
      auto [range, values] = send_recv(static_cast<std::uint32_t>(s), send_c, recv_c);
      for (std::size_t k = 0; k < values.size(); ++k) acc[range.begin + k] += values[k];
    }
    for (std::size_t s = 0; s + 1 < n; ++s) {
      const std::size_t send_c = (r + 1 + n - s) % n;
      const std::size_t recv_c = (r + n - s) % n;
      auto [range, values] = send_recv(static_cast<std::uint32_t>(n - 1 + s), send_c, recv_c);
      std::copy(values.begin(), values.end(), acc.begin() + static_cast<std::ptrdiff_t>(range.begin));
    }
  }
  if (rounds != nullptr) *rounds = steps;

  std::vector<float> out(len);
  const double div = op == ReduceOp::Mean ? static_cast<double>(n) : 1.0;
  for (std::size_t k = 0; k < len; ++k) out[k] = static_cast<float>(acc[k] / div);
  return out;
}

}  // namespace shardpipe
