#include "shardpipe/tasks.hpp"

#include <chrono>
#include <thread>

#include "shardpipe/errors.hpp"
#include "task_table.hpp"

namespace shardpipe {

Bytes encode_floats(std::span<const float> v) {
  ByteWriter w;
  w.put(static_cast<std::uint64_t>(v.size()));
  w.put_array(v);
  return w.take();
}

namespace {

std::vector<float> read_floats(ByteReader<>& r) {
  const auto n = r.get<std::uint64_t>();
  if (n > r.remaining() / sizeof(float)) throw ProtocolError("float vector longer than payload");
  std::vector<float> out(static_cast<std::size_t>(n));
  r.get_array(std::span<float>(out));
  return out;
}

void expect_done(const ByteReader<>& r, const char* what) {
  if (!r.done()) throw ProtocolError(std::string("trailing bytes in ") + what);
}

}  // namespace

std::vector<float> decode_floats(std::span<const std::byte> b) {
  ByteReader r(b);
  auto out = read_floats(r);
  expect_done(r, "float vector");
  return out;
}

Bytes encode_u32(std::uint32_t v) {
  ByteWriter w;
  w.put(v);
  return w.take();
}

Bytes encode_u64(std::uint64_t v) {
  ByteWriter w;
  w.put(v);
  return w.take();
}

std::int32_t decode_i32(std::span<const std::byte> b) {
  ByteReader r(b);
  const auto v = r.get<std::int32_t>();
  expect_done(r, "i32");
  return v;
}

std::uint64_t decode_u64(std::span<const std::byte> b) {
  ByteReader r(b);
  const auto v = r.get<std::uint64_t>();
  expect_done(r, "u64");
  return v;
}

Bytes encode_allreduce_args(ReduceOp op, std::span<const float> values) {
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(op));
  w.put_bytes(encode_floats(values));
  return w.take();
}

AllreduceResult decode_allreduce_result(std::span<const std::byte> b) {
  ByteReader r(b);
  AllreduceResult out;
  out.values = read_floats(r);
  out.rounds = r.get<std::uint64_t>();
  expect_done(r, "allreduce result");
  return out;
}

Bytes encode_fail_on_args(int worker_id, const std::string& message) {
  ByteWriter w;
  w.put(static_cast<std::int32_t>(worker_id));
  w.put_string(message);
  return w.take();
}

void register_builtin_tasks(TaskRegistry& registry) {
  registry.add("echo", [](TaskContext& ctx, std::span<const std::byte>) {
    ByteWriter w;
    w.put(static_cast<std::int32_t>(ctx.state.id));
    return w.take();
  });

  registry.add("sleep_ms", [](TaskContext&, std::span<const std::byte> args) {
    ByteReader r(args);
    std::this_thread::sleep_for(std::chrono::milliseconds(r.get<std::uint32_t>()));
    return Bytes{};
  });

  registry.add("barrier", [](TaskContext& ctx, std::span<const std::byte>) {
    ctx.comm.barrier();
    return Bytes{};
  });

  registry.add("broadcast_checksum", [](TaskContext& ctx, std::span<const std::byte>) {
    return encode_u64(fnv1a(ctx.state.broadcast));
  });

  registry.add("partition_rows", [](TaskContext& ctx, std::span<const std::byte>) {
    return encode_u64(ctx.state.partition ? ctx.state.partition->num_rows() : 0);
  });

  registry.add("allreduce", [](TaskContext& ctx, std::span<const std::byte> args) {
    ByteReader r(args);
    const auto op_code = r.get<std::uint8_t>();
    if (op_code > static_cast<std::uint8_t>(ReduceOp::Mean)) throw ProtocolError("bad reduce op");
    const auto values = read_floats(r);
    expect_done(r, "allreduce args");
    const auto reduced = ctx.comm.allreduce(values, static_cast<ReduceOp>(op_code));
    ByteWriter w;
    w.put_bytes(encode_floats(reduced));
    w.put(static_cast<std::uint64_t>(ctx.comm.last_rounds()));
    return w.take();
  });

  registry.add("fail_on", [](TaskContext& ctx, std::span<const std::byte> args) {
    ByteReader r(args);
    const auto target = r.get<std::int32_t>();
    const auto message = r.get_string();
    if (target == ctx.state.id) throw Error(message);
    return Bytes{};
  });

  register_estimator_tasks(registry);
}

}  // namespace shardpipe
