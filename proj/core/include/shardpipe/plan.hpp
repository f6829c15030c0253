#pragma once

#include <cstddef>
#include <optional>
#include <string_view>

#include "shardpipe/nn.hpp"
#include "shardpipe/quant.hpp"
#include "shardpipe/tensor.hpp"

namespace shardpipe {

enum class Precision { FP32, INT8 };

std::string_view to_string(Precision p);
std::optional<Precision> parse_precision(std::string_view s);

struct ExecPlan {
  std::size_t threads = 1;
  Precision precision = Precision::FP32;
  std::size_t block_size = 32;

  KernelOptions kernel() const { return {threads, block_size}; }
  friend bool operator==(const ExecPlan&, const ExecPlan&) = default;
};

// Heuristic constants for select_plan. CLI flags may override the outcome.
inline constexpr std::size_t kRowsPerThread = 16;
inline constexpr std::size_t kLargeDimThreshold = 256;
inline constexpr std::size_t kSmallBlock = 32;
inline constexpr std::size_t kLargeBlock = 64;

struct PlanChoice {
  ExecPlan plan;
  // Set when int8 was requested but no quantized model is available.
  bool int8_unavailable = false;
};

// threads = clamp(ceil(batch / 16), 1, cores); INT8 only when requested and a
// quantized model exists; block 64 when any layer dim is >= 256, else 32.
PlanChoice select_plan(std::size_t cores, const ModelSpec& spec, std::size_t batch,
                       bool want_int8, bool have_quantized);

// The fp32 model plus, optionally, its quantized counterpart.
struct InferenceModel {
  ModelSpec spec;
  ModelParams params;
  std::optional<QuantizedModel> quantized;
};

// Runs the model under `plan`. FP32 output is bit-identical for every thread
// count; an INT8 plan without a quantized model throws ModelError.
Tensor infer(const InferenceModel& model, const Tensor& batch, const ExecPlan& plan);

}  // namespace shardpipe
