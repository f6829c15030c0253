#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shardpipe/bytes.hpp"

namespace shardpipe {

// Frame layout: "SPW1" | u32 payload length (LE) | u8 msg_type | payload.
inline constexpr std::array<char, 4> kFrameMagic = {'S', 'P', 'W', '1'};
inline constexpr std::size_t kFrameHeaderSize = 9;
inline constexpr std::uint32_t kMaxFramePayload = 1u << 30;

enum class MsgType : std::uint8_t {
  Hello = 0,
  HelloAck = 1,
  Barrier = 2,
  BarrierRelease = 3,
  Broadcast = 4,
  Scatter = 5,
  AllreduceChunk = 6,
  TaskRun = 7,
  TaskResult = 8,
  Heartbeat = 9,
  Shutdown = 10,
  Error = 11,
};
inline constexpr std::uint8_t kMaxMsgType = 11;

std::string_view to_string(MsgType t);

struct Frame {
  MsgType type = MsgType::Heartbeat;
  Bytes payload;

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct FrameHeader {
  MsgType type;
  std::uint32_t length;
};

Bytes encode_frame(const Frame& f);
Bytes encode_frame(MsgType type, std::span<const std::byte> payload);

// Validates magic, msg_type and the length bound. Throws ProtocolError.
FrameHeader decode_header(std::span<const std::byte> header);

// Decodes exactly one frame occupying all of `bytes`.
Frame decode_frame(std::span<const std::byte> bytes);

// Payloads. Each encodes with ByteWriter and decodes strictly (trailing bytes
// are a protocol error).
struct HelloMsg {
  std::uint32_t worker_id = 0;
  std::uint32_t ring_port = 0;
  std::uint32_t pid = 0;
};

struct HelloAckMsg {
  std::uint32_t worker_id = 0;
  std::uint32_t n_workers = 0;
  std::string successor_host;
  std::uint32_t successor_port = 0;
};

struct TaskRunMsg {
  std::uint64_t seq = 0;
  std::string task;
  Bytes args;
};

struct TaskResultMsg {
  std::uint64_t seq = 0;
  Bytes result;
};

struct ErrorMsg {
  std::uint64_t seq = 0;
  std::string message;
};

// One ring step: `chunk` of the vector, carried as float64 partial sums.
struct AllreduceChunkMsg {
  std::uint32_t step = 0;
  std::uint32_t chunk = 0;
  std::uint64_t total_length = 0;  // sender's full vector length
  std::vector<double> values;
};

Bytes encode(const HelloMsg& m);
Bytes encode(const HelloAckMsg& m);
Bytes encode(const TaskRunMsg& m);
Bytes encode(const TaskResultMsg& m);
Bytes encode(const ErrorMsg& m);
Bytes encode(const AllreduceChunkMsg& m);

HelloMsg decode_hello(std::span<const std::byte> p);
HelloAckMsg decode_hello_ack(std::span<const std::byte> p);
TaskRunMsg decode_task_run(std::span<const std::byte> p);
TaskResultMsg decode_task_result(std::span<const std::byte> p);
ErrorMsg decode_error(std::span<const std::byte> p);
AllreduceChunkMsg decode_allreduce_chunk(std::span<const std::byte> p);

}  // namespace shardpipe
