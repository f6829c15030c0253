#include "shardpipe/quant.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <limits>

#include "shardpipe/checkpoint.hpp"
#include "shardpipe/errors.hpp"
#include "shardpipe/thread_pool.hpp"

namespace shardpipe {

QuantParams params_for_range(float lo, float hi) {
  lo = std::min(lo, 0.0f);
  hi = std::max(hi, 0.0f);
  if (hi == lo) return {1.0f, 128};
  const float scale = (hi - lo) / 255.0f;
  const double zp = std::round(-static_cast<double>(lo) / scale);
  return {scale, static_cast<std::uint8_t>(std::clamp(zp, 0.0, 255.0))};
}

void RangeObserver::observe(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) continue;
    if (!seen_) {
      min_ = max_ = v;
      seen_ = true;
    } else {
      min_ = std::min(min_, v);
      max_ = std::max(max_, v);
    }
  }
}

QuantParams RangeObserver::params() const {
  if (!seen_) throw CalibrationError("calibration observed no finite values");
  return params_for_range(min_, max_);
}

QuantParams calibrate(std::span<const Tensor> samples) {
  RangeObserver obs;
  for (const auto& t : samples) obs.observe(t);
  return obs.params();
}

std::uint8_t quantize_value(float x, const QuantParams& p) {
  const double q = std::round(static_cast<double>(x) / p.scale) + p.zero_point;
  if (!(q > 0.0)) return 0;  // also catches NaN
  if (q > 255.0) return 255;
  return static_cast<std::uint8_t>(q);
}

float dequantize_value(std::uint8_t q, const QuantParams& p) {
  return p.scale * static_cast<float>(static_cast<int>(q) - static_cast<int>(p.zero_point));
}

QuantizedTensor quantize_tensor(const Tensor& t, const QuantParams& p) {
  QuantizedTensor q{t.rows(), t.cols(), std::vector<std::uint8_t>(t.size()), p};
  const auto src = t.data();
  for (std::size_t i = 0; i < src.size(); ++i) q.data[i] = quantize_value(src[i], p);
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor t(q.rows, q.cols);
  auto dst = t.data();
  for (std::size_t i = 0; i < q.data.size(); ++i) dst[i] = dequantize_value(q.data[i], q.params);
  return t;
}

PackedWeights pack_weights(const QuantizedTensor& w) {
  PackedWeights p{w.rows, w.cols, w.params.scale, std::vector<std::int16_t>(w.data.size())};
  const int z = w.params.zero_point;
  for (std::size_t k = 0; k < w.rows; ++k) {
    for (std::size_t j = 0; j < w.cols; ++j) {
      p.centered[j * w.rows + k] = static_cast<std::int16_t>(w.data[k * w.cols + j] - z);
    }
  }
  return p;
}

namespace {

std::int32_t dot_i16(const std::int16_t* a, const std::int16_t* b, std::size_t n) {
  std::int32_t acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += static_cast<std::int32_t>(a[k]) * b[k];
  return acc;
}

void qmatmul_rows(const std::vector<std::int16_t>& in, const PackedWeights& w, float out_scale,
                  const Tensor& bias, Tensor& out, std::size_t r0, std::size_t r1) {
  const std::size_t k_dim = w.in_dim;
  const std::size_t n = w.out_dim;
  constexpr std::size_t kColBlock = 32;
  const auto b = bias.row(0);
  for (std::size_t jj = 0; jj < n; jj += kColBlock) {
    const std::size_t j_end = std::min(jj + kColBlock, n);
    for (std::size_t i = r0; i < r1; ++i) {
      const std::int16_t* a = in.data() + i * k_dim;
      float* o = out.data().data() + i * n;
      for (std::size_t j = jj; j < j_end; ++j) {
        const std::int32_t acc = dot_i16(a, w.centered.data() + j * k_dim, k_dim);
        o[j] = static_cast<float>(acc) * out_scale + b[j];
      }
    }
  }
}

}  // namespace

Tensor quantized_matmul(const QuantizedTensor& q_in, const PackedWeights& w, const Tensor& bias,
                        const KernelOptions& opts) {
  if (q_in.cols != w.in_dim) {
    throw DimensionError("quantized matmul shape mismatch: " + std::to_string(q_in.rows) + "x" +
                         std::to_string(q_in.cols) + " x " + std::to_string(w.in_dim) + "x" +
                         std::to_string(w.out_dim));
  }
  if (bias.rows() != 1 || bias.cols() != w.out_dim) {
    throw DimensionError("bias shape " + bias.shape_string() + " does not match " +
                         std::to_string(w.out_dim) + " outputs");
  }
  assert(w.in_dim <= kMaxQuantizedInnerDim);

  std::vector<std::int16_t> centered(q_in.data.size());
  const int z = q_in.params.zero_point;
  for (std::size_t i = 0; i < centered.size(); ++i) {
    centered[i] = static_cast<std::int16_t>(q_in.data[i] - z);
  }

  Tensor out(q_in.rows, w.out_dim);
  if (out.empty()) return out;
  const float out_scale = q_in.params.scale * w.scale;
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, q_in.rows);
  if (threads == 1) {
    qmatmul_rows(centered, w, out_scale, bias, out, 0, q_in.rows);
  } else {
    shared_pool(threads).run(threads, [&](std::size_t part) {
      const Range r = balanced_range(q_in.rows, threads, part);
      qmatmul_rows(centered, w, out_scale, bias, out, r.begin, r.end);
    });
  }
  return out;
}

Tensor quantized_matmul(const QuantizedTensor& q_in, const QuantizedTensor& q_w,
                        const Tensor& bias, const KernelOptions& opts) {
  return quantized_matmul(q_in, pack_weights(q_w), bias, opts);
}

namespace {

void activate(Activation act, Tensor& t) {
  switch (act) {
    case Activation::Identity: break;
    case Activation::ReLU:
      for (float& v : t.data()) v = v > 0.0f ? v : 0.0f;
      break;
    case Activation::Softmax:
      for (std::size_t i = 0; i < t.rows(); ++i) {
        auto r = t.row(i);
        if (r.empty()) continue;
        const float m = *std::max_element(r.begin(), r.end());
        float sum = 0.0f;
        for (float& v : r) {
          v = std::exp(v - m);
          sum += v;
        }
        for (float& v : r) v /= sum;
      }
      break;
  }
}

}  // namespace

QuantizedModel quantize_model(const ModelSpec& spec, const ModelParams& params,
                              std::span<const Tensor> calibration, const KernelOptions& opts) {
  validate(spec);
  check_shapes(spec, params);
  std::size_t rows = 0;
  for (const auto& t : calibration) rows += t.rows();
  if (rows == 0) throw CalibrationError("quantize_model needs at least one calibration row");
  for (const auto& l : spec.layers) {
    if (l.input_dim > kMaxQuantizedInnerDim) {
      throw ModelError("layer input_dim " + std::to_string(l.input_dim) +
                       " exceeds the int32 accumulator bound " +
                       std::to_string(kMaxQuantizedInnerDim));
    }
  }

  std::vector<RangeObserver> in_obs(spec.layers.size());
  std::vector<RangeObserver> out_obs(spec.layers.size());
  for (const auto& batch : calibration) {
    if (batch.rows() == 0) continue;
    if (batch.cols() != spec.input_dim()) {
      throw DimensionError("calibration batch has " + std::to_string(batch.cols()) +
                           " columns, model expects " + std::to_string(spec.input_dim()));
    }
    Tensor a = batch;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      in_obs[l].observe(a);
      Tensor z = matmul(a, params.layers[l].weight, opts);
      add_row_bias(z, params.layers[l].bias);
      out_obs[l].observe(z);
      activate(spec.layers[l].activation, z);
      a = std::move(z);
    }
  }

  QuantizedModel qm;
  qm.spec = spec;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    RangeObserver w_obs;
    w_obs.observe(params.layers[l].weight);
    QuantizedLayer ql;
    ql.weight = quantize_tensor(params.layers[l].weight, w_obs.params());
    ql.bias = params.layers[l].bias;
    ql.input = in_obs[l].params();
    ql.output = out_obs[l].params();
    ql.packed = pack_weights(ql.weight);
    qm.layers.push_back(std::move(ql));
  }
  return qm;
}

Tensor quantized_forward(const QuantizedModel& model, const Tensor& batch,
                         const KernelOptions& opts) {
  if (batch.cols() != model.spec.input_dim()) {
    throw DimensionError("batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(model.spec.input_dim()));
  }
  Tensor a = batch;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& ql = model.layers[l];
    Tensor z = quantized_matmul(quantize_tensor(a, ql.input), ql.packed, ql.bias, opts);
    activate(model.spec.layers[l].activation, z);
    a = std::move(z);
  }
  return a;
}

namespace {

constexpr char kQuantMagic[4] = {'S', 'P', 'Q', '8'};
constexpr std::uint16_t kQuantVersion = 1;

void put_params(ByteWriter& w, const QuantParams& p) {
  w.put(p.scale);
  w.put(p.zero_point);
}

QuantParams get_params(ByteReader<CheckpointError>& r) {
  QuantParams p;
  p.scale = r.get<float>();
  p.zero_point = r.get<std::uint8_t>();
  if (!(p.scale > 0.0f) || !std::isfinite(p.scale)) {
    throw CheckpointError("quantized model has a non-positive scale");
  }
  return p;
}

}  // namespace

Bytes encode_quantized(const QuantizedModel& model) {
  ByteWriter w;
  w.put_raw({kQuantMagic, 4});
  w.put(kQuantVersion);
  w.put(static_cast<std::uint16_t>(model.layers.size()));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& s = model.spec.layers[l];
    const auto& ql = model.layers[l];
    w.put(static_cast<std::uint32_t>(s.input_dim));
    w.put(static_cast<std::uint32_t>(s.output_dim));
    w.put(static_cast<std::uint8_t>(s.activation));
    put_params(w, ql.weight.params);
    put_params(w, ql.input);
    put_params(w, ql.output);
    w.put_array(std::span<const std::uint8_t>(ql.weight.data));
    w.put_array(ql.bias.data());
  }
  w.put(static_cast<std::uint8_t>(model.spec.loss));
  return w.take();
}

QuantizedModel decode_quantized(std::span<const std::byte> bytes) {
  ByteReader<CheckpointError> r(bytes);
  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kQuantMagic, 4) != 0) {
    throw CheckpointError("bad quantized model magic");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != kQuantVersion) {
    throw CheckpointError("unsupported quantized model version " + std::to_string(version));
  }
  const auto n = r.get<std::uint16_t>();
  QuantizedModel qm;
  for (std::uint16_t l = 0; l < n; ++l) {
    LayerSpec s;
    s.input_dim = r.get<std::uint32_t>();
    s.output_dim = r.get<std::uint32_t>();
    const auto act = r.get<std::uint8_t>();
    if (act > 2) throw CheckpointError("unknown activation code " + std::to_string(act));
    s.activation = static_cast<Activation>(act);
    QuantizedLayer ql;
    const QuantParams wp = get_params(r);
    ql.input = get_params(r);
    ql.output = get_params(r);
    if (s.input_dim * s.output_dim + s.output_dim * sizeof(float) > r.remaining()) {
      throw CheckpointError("truncated quantized model in layer " + std::to_string(l));
    }
    ql.weight = {s.input_dim, s.output_dim, std::vector<std::uint8_t>(s.input_dim * s.output_dim), wp};
    r.get_array(std::span<std::uint8_t>(ql.weight.data));
    ql.bias = Tensor(1, s.output_dim);
    r.get_array(ql.bias.data());
    ql.packed = pack_weights(ql.weight);
    qm.spec.layers.push_back(s);
    qm.layers.push_back(std::move(ql));
  }
  const auto loss = r.get<std::uint8_t>();
  if (loss > 1) throw CheckpointError("unknown loss code " + std::to_string(loss));
  qm.spec.loss = static_cast<Loss>(loss);
  if (!r.done()) throw CheckpointError("trailing bytes after quantized model");
  try {
    validate(qm.spec);
  } catch (const ModelError& e) {
    throw CheckpointError(std::string("quantized model is invalid: ") + e.what());
  }
  return qm;
}

void save_quantized(const std::filesystem::path& path, const QuantizedModel& model) {
  write_file_bytes(path, encode_quantized(model));
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw CheckpointError("quantized model not found: " + path.string());
  }
  return decode_quantized(read_file_bytes(path));
}

double max_abs_relative_deviation(const Tensor& candidate, const Tensor& reference) {
  if (candidate.rows() != reference.rows() || candidate.cols() != reference.cols()) {
    throw DimensionError("deviation shape mismatch: " + candidate.shape_string() + " vs " +
                         reference.shape_string());
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    num = std::max(num, std::fabs(static_cast<double>(candidate.data()[i]) - reference.data()[i]));
    den = std::max(den, std::fabs(static_cast<double>(reference.data()[i])));
  }
  return num / std::max(den, static_cast<double>(std::numeric_limits<float>::min()));
}

}  // namespace shardpipe
