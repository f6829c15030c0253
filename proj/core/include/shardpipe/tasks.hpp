#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shardpipe/bytes.hpp"
#include "shardpipe/communicator.hpp"

namespace shardpipe {

// Argument and result codecs for the built-in tasks:
//   echo               -> i32 worker id
//   sleep_ms(u32)      -> empty
//   barrier            -> empty
//   broadcast_checksum -> u64 FNV-1a of the last broadcast payload
//   partition_rows     -> u64 rows in the scattered partition (0 if none)
//   allreduce(op, v)   -> reduced vector plus the round count
//   fail_on(id, msg)   -> throws msg on worker id, empty elsewhere

Bytes encode_floats(std::span<const float> v);
std::vector<float> decode_floats(std::span<const std::byte> b);

Bytes encode_u32(std::uint32_t v);
Bytes encode_u64(std::uint64_t v);
std::int32_t decode_i32(std::span<const std::byte> b);
std::uint64_t decode_u64(std::span<const std::byte> b);

Bytes encode_allreduce_args(ReduceOp op, std::span<const float> values);

struct AllreduceResult {
  std::vector<float> values;
  std::uint64_t rounds = 0;
};
AllreduceResult decode_allreduce_result(std::span<const std::byte> b);

Bytes encode_fail_on_args(int worker_id, const std::string& message);

}  // namespace shardpipe
