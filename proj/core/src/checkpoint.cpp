#include "shardpipe/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "shardpipe/bytes.hpp"
#include "shardpipe/errors.hpp"

namespace shardpipe {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'N', 'N'};

Activation activation_from_code(std::uint8_t code) {
  if (code > 2) throw CheckpointError("unknown activation code " + std::to_string(code));
  return static_cast<Activation>(code);
}

Loss loss_from_code(std::uint8_t code) {
  if (code > 1) throw CheckpointError("unknown loss code " + std::to_string(code));
  return static_cast<Loss>(code);
}

}  // namespace

Bytes encode_checkpoint(const ModelSpec& spec, const ModelParams& params) {
  validate(spec);
  check_shapes(spec, params);
  ByteWriter w;
  w.put_raw({kMagic, 4});
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint16_t>(spec.layers.size()));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    w.put(static_cast<std::uint32_t>(l.input_dim));
    w.put(static_cast<std::uint32_t>(l.output_dim));
    w.put(static_cast<std::uint8_t>(l.activation));
    w.put_array(params.layers[i].weight.data());
    w.put_array(params.layers[i].bias.data());
  }
  w.put(static_cast<std::uint8_t>(spec.loss));
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  ByteReader<CheckpointError> r(bytes);
  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n_layers = r.get<std::uint16_t>();
  Checkpoint ck;
  for (std::uint16_t i = 0; i < n_layers; ++i) {
    LayerSpec l;
    l.input_dim = r.get<std::uint32_t>();
    l.output_dim = r.get<std::uint32_t>();
    l.activation = activation_from_code(r.get<std::uint8_t>());
    // Guard against absurd dims before allocating.
    const std::size_t need = (l.input_dim * l.output_dim + l.output_dim) * sizeof(float);
    if (need > r.remaining()) throw CheckpointError("truncated checkpoint in layer " + std::to_string(i));
    DenseParams p{Tensor(l.input_dim, l.output_dim), Tensor(1, l.output_dim)};
    r.get_array(p.weight.data());
    r.get_array(p.bias.data());
    ck.spec.layers.push_back(l);
    ck.params.layers.push_back(std::move(p));
  }
  ck.spec.loss = loss_from_code(r.get<std::uint8_t>());
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  try {
    validate(ck.spec);
  } catch (const ModelError& e) {
    throw CheckpointError(std::string("checkpoint holds an invalid model: ") + e.what());
  }
  return ck;
}

Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Bytes out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ModelParams& params) {
  write_file_bytes(path, encode_checkpoint(spec, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace shardpipe
