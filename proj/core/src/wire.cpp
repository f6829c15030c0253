#include "shardpipe/wire.hpp"

#include <cstring>

#include "shardpipe/errors.hpp"

namespace shardpipe {

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::Hello: return "Hello";
    case MsgType::HelloAck: return "HelloAck";
    case MsgType::Barrier: return "Barrier";
    case MsgType::BarrierRelease: return "BarrierRelease";
    case MsgType::Broadcast: return "Broadcast";
    case MsgType::Scatter: return "Scatter";
    case MsgType::AllreduceChunk: return "AllreduceChunk";
    case MsgType::TaskRun: return "TaskRun";
    case MsgType::TaskResult: return "TaskResult";
    case MsgType::Heartbeat: return "Heartbeat";
    case MsgType::Shutdown: return "Shutdown";
    case MsgType::Error: return "Error";
  }
  return "?";
}

Bytes encode_frame(MsgType type, std::span<const std::byte> payload) {
  if (payload.size() > kMaxFramePayload) {
    throw ProtocolError("frame payload of " + std::to_string(payload.size()) + " bytes exceeds limit");
  }
  ByteWriter w;
  w.put_raw({kFrameMagic.data(), kFrameMagic.size()});
  w.put(static_cast<std::uint32_t>(payload.size()));
  w.put(static_cast<std::uint8_t>(type));
  w.put_bytes(payload);
  return w.take();
}

Bytes encode_frame(const Frame& f) { return encode_frame(f.type, f.payload); }

FrameHeader decode_header(std::span<const std::byte> header) {
  if (header.size() != kFrameHeaderSize) throw ProtocolError("frame header must be 9 bytes");
  if (std::memcmp(header.data(), kFrameMagic.data(), kFrameMagic.size()) != 0) {
    throw ProtocolError("bad frame magic");
  }
  std::uint32_t len;
  std::memcpy(&len, header.data() + 4, 4);
  const auto code = static_cast<std::uint8_t>(header[8]);
  if (code > kMaxMsgType) throw ProtocolError("unknown msg_type " + std::to_string(code));
  if (len > kMaxFramePayload) throw ProtocolError("frame length " + std::to_string(len) + " exceeds limit");
  return {static_cast<MsgType>(code), len};
}

Frame decode_frame(std::span<const std::byte> bytes) {
  if (bytes.size() < kFrameHeaderSize) throw ProtocolError("truncated frame header");
  const FrameHeader h = decode_header(bytes.first(kFrameHeaderSize));
  if (bytes.size() - kFrameHeaderSize != h.length) {
    throw ProtocolError("frame length field " + std::to_string(h.length) + " does not match " +
                        std::to_string(bytes.size() - kFrameHeaderSize) + " payload bytes");
  }
  const auto payload = bytes.subspan(kFrameHeaderSize);
  return {h.type, Bytes(payload.begin(), payload.end())};
}

namespace {

void expect_done(const ByteReader<ProtocolError>& r, const char* what) {
  if (!r.done()) throw ProtocolError(std::string("trailing bytes in ") + what + " payload");
}

}  // namespace

Bytes encode(const HelloMsg& m) {
  ByteWriter w;
  w.put(m.worker_id);
  w.put(m.ring_port);
  w.put(m.pid);
  return w.take();
}

Bytes encode(const HelloAckMsg& m) {
  ByteWriter w;
  w.put(m.worker_id);
  w.put(m.n_workers);
  w.put_string(m.successor_host);
  w.put(m.successor_port);
  return w.take();
}

Bytes encode(const TaskRunMsg& m) {
  ByteWriter w;
  w.put(m.seq);
  w.put_string(m.task);
  w.put_blob(m.args);
  return w.take();
}

Bytes encode(const TaskResultMsg& m) {
  ByteWriter w;
  w.put(m.seq);
  w.put_blob(m.result);
  return w.take();
}

Bytes encode(const ErrorMsg& m) {
  ByteWriter w;
  w.put(m.seq);
  w.put_string(m.message);
  return w.take();
}

Bytes encode(const AllreduceChunkMsg& m) {
  ByteWriter w;
  w.put(m.step);
  w.put(m.chunk);
  w.put(m.total_length);
  w.put(static_cast<std::uint32_t>(m.values.size()));
  w.put_array(std::span<const double>(m.values));
  return w.take();
}

HelloMsg decode_hello(std::span<const std::byte> p) {
  ByteReader r(p);
  HelloMsg m;
  m.worker_id = r.get<std::uint32_t>();
  m.ring_port = r.get<std::uint32_t>();
  m.pid = r.get<std::uint32_t>();
  expect_done(r, "Hello");
  return m;
}

HelloAckMsg decode_hello_ack(std::span<const std::byte> p) {
  ByteReader r(p);
  HelloAckMsg m;
  m.worker_id = r.get<std::uint32_t>();
  m.n_workers = r.get<std::uint32_t>();
  m.successor_host = r.get_string();
  m.successor_port = r.get<std::uint32_t>();
  expect_done(r, "HelloAck");
  return m;
}

TaskRunMsg decode_task_run(std::span<const std::byte> p) {
  ByteReader r(p);
  TaskRunMsg m;
  m.seq = r.get<std::uint64_t>();
  m.task = r.get_string();
  m.args = r.get_blob();
  expect_done(r, "TaskRun");
  return m;
}

TaskResultMsg decode_task_result(std::span<const std::byte> p) {
  ByteReader r(p);
  TaskResultMsg m;
  m.seq = r.get<std::uint64_t>();
  m.result = r.get_blob();
  expect_done(r, "TaskResult");
  return m;
}

ErrorMsg decode_error(std::span<const std::byte> p) {
  ByteReader r(p);
  ErrorMsg m;
  m.seq = r.get<std::uint64_t>();
  m.message = r.get_string();
  expect_done(r, "Error");
  return m;
}

AllreduceChunkMsg decode_allreduce_chunk(std::span<const std::byte> p) {
  ByteReader r(p);
  AllreduceChunkMsg m;
  m.step = r.get<std::uint32_t>();
  m.chunk = r.get<std::uint32_t>();
  m.total_length = r.get<std::uint64_t>();
  const auto n = r.get<std::uint32_t>();
  if (static_cast<std::size_t>(n) * sizeof(double) != r.remaining()) {
    throw ProtocolError("AllreduceChunk length " + std::to_string(n) + " does not match frame size");
  }
  m.values.resize(n);
  r.get_array(std::span<double>(m.values));
  expect_done(r, "AllreduceChunk");
  return m;
}

}  // namespace shardpipe
