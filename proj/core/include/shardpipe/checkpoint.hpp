#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "shardpipe/nn.hpp"

namespace shardpipe {

// On-disk model checkpoint, little-endian:
//   "SPNN" | u16 version=1 | u16 layer_count
//   per layer: u32 input_dim | u32 output_dim | u8 activation
//              | input_dim*output_dim f32 weights (row-major) | output_dim f32 bias
//   u8 loss
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  ModelParams params;
};

std::vector<std::byte> encode_checkpoint(const ModelSpec& spec, const ModelParams& params);

// Throws CheckpointError on bad magic, unsupported version, truncation, or
// trailing bytes. Nothing is returned unless the whole buffer parsed.
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ModelParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace shardpipe
