#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "shardpipe/arch.hpp"
#include "shardpipe/errors.hpp"
#include "shardpipe/quant.hpp"

using namespace shardpipe;

namespace {

Tensor uniform(std::size_t r, std::size_t c, float lo, float hi, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor t(r, c);
  for (float& v : t.data()) v = d(rng);
  return t;
}

// Integer reference: the accumulator in int64 so overflow would show up as a
// mismatch rather than wrap silently.
Tensor reference_qmatmul(const QuantizedTensor& a, const QuantizedTensor& w, const Tensor& bias) {
  Tensor out(a.rows, w.cols);
  const float scale = a.params.scale * w.params.scale;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < w.cols; ++j) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += (static_cast<std::int64_t>(a.data[i * a.cols + k]) - a.params.zero_point) *
               (static_cast<std::int64_t>(w.data[k * w.cols + j]) - w.params.zero_point);
      }
      out(i, j) = static_cast<float>(acc) * scale + bias(0, j);
    }
  }
  return out;
}

}  // namespace

TEST(QuantParams, RangeIncludesZero) {
  const QuantParams p = params_for_range(-1.0f, 3.0f);
  EXPECT_FLOAT_EQ(p.scale, 4.0f / 255.0f);
  EXPECT_EQ(p.zero_point, 64);  // round(1 / (4/255)) = round(63.75)
  const QuantParams pos = params_for_range(2.0f, 5.0f);
  EXPECT_FLOAT_EQ(pos.scale, 5.0f / 255.0f);
  EXPECT_EQ(pos.zero_point, 0);
  const QuantParams neg = params_for_range(-5.0f, -2.0f);
  EXPECT_EQ(neg.zero_point, 255);
  EXPECT_EQ(params_for_range(0.0f, 0.0f), (QuantParams{1.0f, 128}));
  EXPECT_EQ(quantize_value(0.0f, p), p.zero_point);
  EXPECT_EQ(dequantize_value(p.zero_point, p), 0.0f);
}

TEST(QuantParams, ObserverIgnoresNonFinite) {
  RangeObserver obs;
  EXPECT_THROW(obs.params(), CalibrationError);
  const float vals[] = {std::numeric_limits<float>::quiet_NaN(), 0.5f, -2.0f,
                        std::numeric_limits<float>::infinity()};
  obs.observe(vals);
  EXPECT_EQ(obs.min(), -2.0f);
  EXPECT_EQ(obs.max(), 0.5f);
  EXPECT_THROW(calibrate(std::span<const Tensor>{}), CalibrationError);
}

TEST(QuantParams, RoundTripWithinHalfStep) {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_real_distribution<float> ends(-10.0f, 10.0f);
    float lo = ends(rng);
    float hi = ends(rng);
    if (lo > hi) std::swap(lo, hi);
    const Tensor t = uniform(4, 25, lo, hi, trial);
    const QuantParams p = params_for_range(lo, hi);
    const Tensor back = dequantize(quantize_tensor(t, p));
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float x = t.data()[i];
      EXPECT_LE(std::fabs(back.data()[i] - x), p.scale / 2 + 1e-6f * std::max(1.0f, std::fabs(x)))
          << "x=" << x << " scale=" << p.scale;
    }
  }
}

TEST(QuantParams, OutOfRangeSaturates) {
  const QuantParams p = params_for_range(-1.0f, 1.0f);
  EXPECT_EQ(quantize_value(100.0f, p), 255);
  EXPECT_EQ(quantize_value(-100.0f, p), 0);
}

TEST(QuantKernel, MatchesIntegerReference) {
  std::mt19937 rng(4);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 17, 3}, {33, 300, 40}}) {
    const Tensor a = uniform(m, k, -1.0f, 2.0f, rng());
    const Tensor w = uniform(k, n, -0.5f, 0.5f, rng());
    const Tensor b = uniform(1, n, -1.0f, 1.0f, rng());
    const auto qa = quantize_tensor(a, params_for_range(-1.0f, 2.0f));
    const auto qw = quantize_tensor(w, params_for_range(-0.5f, 0.5f));
    const Tensor ref = reference_qmatmul(qa, qw, b);
    for (std::size_t t : {1, 2, 4}) EXPECT_EQ(quantized_matmul(qa, qw, b, {t, 32}), ref);
  }
}

TEST(QuantKernel, ExtremeCodesAtTheInnerDimBound) {
  // Every product at its maximum magnitude (255 * 255) over the largest
  // allowed inner dimension.
  const std::size_t k = kMaxQuantizedInnerDim;
  QuantizedTensor a{1, k, std::vector<std::uint8_t>(k, 255), {1.0f, 0}};
  QuantizedTensor w{k, 1, std::vector<std::uint8_t>(k, 255), {1.0f, 0}};
  const Tensor out = quantized_matmul(a, w, Tensor(1, 1));
  EXPECT_EQ(out(0, 0), static_cast<float>(255.0 * 255.0 * static_cast<double>(k)));
  EXPECT_LE(255.0 * 255.0 * static_cast<double>(k), static_cast<double>(INT32_MAX));
}

TEST(QuantKernel, ShapeErrors) {
  QuantizedTensor a{2, 3, std::vector<std::uint8_t>(6), {}};
  QuantizedTensor w{4, 1, std::vector<std::uint8_t>(4), {}};
  EXPECT_THROW(quantized_matmul(a, w, Tensor(1, 1)), DimensionError);
  QuantizedTensor w3{3, 2, std::vector<std::uint8_t>(6), {}};
  EXPECT_THROW(quantized_matmul(a, w3, Tensor(1, 3)), DimensionError);
}

TEST(QuantModel, CloseToFloatAndRoundTripsThroughFile) {
  const ModelSpec s = parse_arch("20-32-4:relu,softmax");
  const ModelParams p = init_params(s, 3);
  const Tensor calib = uniform(64, 20, -1.0f, 1.0f, 10);
  const QuantizedModel q = quantize_model(s, p, std::span(&calib, 1));
  const Tensor x = uniform(16, 20, -1.0f, 1.0f, 11);
  const Tensor ref = model_forward(s, p, x);
  const Tensor got = quantized_forward(q, x);
  EXPECT_LT(max_abs_relative_deviation(got, ref), 0.05);

  const auto path = std::filesystem::temp_directory_path() / "shardpipe_test_quant.spq8";
  save_quantized(path, q);
  const QuantizedModel back = load_quantized(path);
  EXPECT_EQ(quantized_forward(back, x), got);
  EXPECT_EQ(encode_quantized(back), encode_quantized(q));
  std::filesystem::remove(path);

  auto bytes = encode_quantized(q);
  bytes.pop_back();
  EXPECT_THROW(decode_quantized(bytes), CheckpointError);
}

TEST(QuantModel, NeedsCalibrationRows) {
  const ModelSpec s = parse_arch("3-2:id");
  const ModelParams p = init_params(s, 1);
  EXPECT_THROW(quantize_model(s, p, std::span<const Tensor>{}), CalibrationError);
  const Tensor empty(0, 3);
  EXPECT_THROW(quantize_model(s, p, std::span(&empty, 1)), CalibrationError);
}

TEST(QuantModel, RejectsInnerDimAboveBound) {
  const ModelSpec s{{{kMaxQuantizedInnerDim + 1, 1, Activation::Identity}}, Loss::MSE};
  const ModelParams p = zeros_like(s);
  const Tensor calib(1, kMaxQuantizedInnerDim + 1);
  EXPECT_THROW(quantize_model(s, p, std::span(&calib, 1)), ModelError);
}

TEST(QuantModel, DeviationMetric) {
  const Tensor ref = Tensor::from_rows({{1.0f, -4.0f}});
  const Tensor c = Tensor::from_rows({{1.5f, -4.0f}});
  EXPECT_DOUBLE_EQ(max_abs_relative_deviation(c, ref), 0.125);
  EXPECT_DOUBLE_EQ(max_abs_relative_deviation(ref, ref), 0.0);
}
