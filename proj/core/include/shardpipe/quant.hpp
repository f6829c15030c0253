#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "shardpipe/bytes.hpp"
#include "shardpipe/nn.hpp"
#include "shardpipe/tensor.hpp"

namespace shardpipe {

// Asymmetric per-tensor uint8 affine mapping: q = clamp(round(x/scale) + zero_point, 0, 255).
struct QuantParams {
  float scale = 1.0f;
  std::uint8_t zero_point = 128;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Range [lo, hi] widened to include 0, then scale = (hi - lo)/255 and
// zero_point = round(-lo/scale) clamped to [0, 255]. A range that is still
// empty after widening ([0, 0]) maps to scale 1, zero_point 128.
QuantParams params_for_range(float lo, float hi);

// Tracks the exact min/max over everything it is shown. Non-finite values are
// ignored.
class RangeObserver {
 public:
  void observe(std::span<const float> values);
  void observe(const Tensor& t) { observe(t.data()); }

  bool seen() const noexcept { return seen_; }
  float min() const noexcept { return min_; }
  float max() const noexcept { return max_; }

  // Throws CalibrationError if no finite value was observed.
  QuantParams params() const;

 private:
  bool seen_ = false;
  float min_ = 0.0f;
  float max_ = 0.0f;
};

QuantParams calibrate(std::span<const Tensor> samples);

std::uint8_t quantize_value(float x, const QuantParams& p);
float dequantize_value(std::uint8_t q, const QuantParams& p);

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;
  QuantParams params;
};

QuantizedTensor quantize_tensor(const Tensor& t, const QuantParams& p);
Tensor dequantize(const QuantizedTensor& q);

// Weights re-laid out for the integer kernel: transposed (output-major) and
// already shifted by the weight zero point.
struct PackedWeights {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  float scale = 1.0f;
  std::vector<std::int16_t> centered;  // out_dim × in_dim
};

PackedWeights pack_weights(const QuantizedTensor& w);

// Largest inner dimension whose int32 accumulator cannot overflow:
// 255 * 255 * k <= INT32_MAX.
inline constexpr std::size_t kMaxQuantizedInnerDim = 33025;

// out = scale_in * scale_w * Σ_k (q_in - z_in)(q_w - z_w) + bias, with the sum
// carried in 32-bit integers. Output stays float32.
Tensor quantized_matmul(const QuantizedTensor& q_in, const PackedWeights& w, const Tensor& bias,
                        const KernelOptions& opts = {});
Tensor quantized_matmul(const QuantizedTensor& q_in, const QuantizedTensor& q_w,
                        const Tensor& bias, const KernelOptions& opts = {});

struct QuantizedLayer {
  QuantizedTensor weight;
  Tensor bias;
  QuantParams input;
  QuantParams output;  // observed range of the layer's pre-activation output
  PackedWeights packed;
};

// Immutable after construction; safe to share across threads.
struct QuantizedModel {
  ModelSpec spec;
  std::vector<QuantizedLayer> layers;
};

// Runs the fp32 model over `calibration` to record per-layer input and output
// ranges, then quantizes every weight tensor per-tensor.
QuantizedModel quantize_model(const ModelSpec& spec, const ModelParams& params,
                              std::span<const Tensor> calibration,
                              const KernelOptions& opts = {});

// Each layer re-quantizes its float input against the recorded input params,
// runs the integer kernel, adds bias and applies the activation in float.
Tensor quantized_forward(const QuantizedModel& model, const Tensor& batch,
                         const KernelOptions& opts = {});

// File format "SPQ8": u16 version=1 | u16 layers | per layer: u32 in | u32 out |
// u8 activation | f32 w_scale | u8 w_zero | f32 in_scale | u8 in_zero |
// f32 out_scale | u8 out_zero | in*out u8 weights | out f32 bias ; u8 loss.
Bytes encode_quantized(const QuantizedModel& model);
QuantizedModel decode_quantized(std::span<const std::byte> bytes);
void save_quantized(const std::filesystem::path& path, const QuantizedModel& model);
QuantizedModel load_quantized(const std::filesystem::path& path);

// max|a - b| / max|reference|, with the denominator floored at the smallest
// normal float so an all-zero reference does not divide by zero.
double max_abs_relative_deviation(const Tensor& candidate, const Tensor& reference);

}  // namespace shardpipe
