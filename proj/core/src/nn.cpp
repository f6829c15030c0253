#include "shardpipe/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "shardpipe/errors.hpp"

namespace shardpipe {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

std::string_view to_string(Loss l) {
  switch (l) {
    case Loss::MSE: return "mse";
    case Loss::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

void validate(const ModelSpec& spec) {
  if (spec.layers.empty()) throw ModelError("model spec has no layers");
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.input_dim == 0 || l.output_dim == 0) {
      throw ModelError("layer " + std::to_string(i) + " has a zero dimension");
    }
    if (l.activation == Activation::Softmax && i + 1 != spec.layers.size()) {
      throw ModelError("softmax is only allowed on the final layer (found on layer " +
                       std::to_string(i) + ")");
    }
    if (i + 1 < spec.layers.size() && l.output_dim != spec.layers[i + 1].input_dim) {
      throw ModelError("layer " + std::to_string(i) + " output_dim " +
                       std::to_string(l.output_dim) + " does not chain into layer " +
                       std::to_string(i + 1) + " input_dim " +
                       std::to_string(spec.layers[i + 1].input_dim));
    }
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void check_shapes(const ModelSpec& spec, const ModelParams& params) {
  if (params.layers.size() != spec.layers.size()) {
    throw ModelError("params have " + std::to_string(params.layers.size()) +
                     " layers, spec has " + std::to_string(spec.layers.size()));
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& s = spec.layers[i];
    const auto& p = params.layers[i];
    if (p.weight.rows() != s.input_dim || p.weight.cols() != s.output_dim ||
        p.bias.rows() != 1 || p.bias.cols() != s.output_dim) {
      throw ModelError("layer " + std::to_string(i) + " params " + p.weight.shape_string() +
                       " / " + p.bias.shape_string() + " do not match spec " +
                       std::to_string(s.input_dim) + "x" + std::to_string(s.output_dim));
    }
  }
}

ModelParams zeros_like(const ModelSpec& spec) {
  ModelParams p;
  p.layers.reserve(spec.layers.size());
  for (const auto& l : spec.layers) {
    p.layers.push_back({Tensor(l.input_dim, l.output_dim), Tensor(1, l.output_dim)});
  }
  return p;
}

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  // mt19937_64 output is fully specified by the standard; the distributions
  // are not, so the float mapping is done by hand.
  std::mt19937_64 rng(seed);
  ModelParams p = zeros_like(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const float limit = 1.0f / std::sqrt(static_cast<float>(spec.layers[i].input_dim));
    for (float& w : p.layers[i].weight.data()) {
      const float u = static_cast<float>(rng() >> 40) * 0x1.0p-24f;  // [0, 1)
      w = (2.0f * u - 1.0f) * limit;
    }
  }
  return p;
}

namespace {

void require_batch(const ModelSpec& spec, const Tensor& batch) {
  validate(spec);
  if (batch.cols() != spec.input_dim()) {
    throw DimensionError("batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(spec.input_dim()));
  }
}

void softmax_rows(Tensor& t) {
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
}

void apply_activation(Activation act, Tensor& t) {
  switch (act) {
    case Activation::Identity: break;
    case Activation::ReLU:
      for (float& v : t.data()) v = v > 0.0f ? v : 0.0f;
      break;
    case Activation::Softmax: softmax_rows(t); break;
  }
}

Tensor transpose(const Tensor& t) {
  Tensor out(t.cols(), t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out(j, i) = t(i, j);
  }
  return out;
}

// Activations a[0] = input, a[l+1] = act(z[l]).
struct Trace {
  std::vector<Tensor> pre;
  std::vector<Tensor> post;
};

Trace forward_trace(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                    const KernelOptions& opts) {
  Trace tr;
  tr.post.push_back(batch);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    Tensor z = matmul(tr.post.back(), params.layers[l].weight, opts);
    add_row_bias(z, params.layers[l].bias);
    Tensor a = z;
    apply_activation(spec.layers[l].activation, a);
    tr.pre.push_back(std::move(z));
    tr.post.push_back(std::move(a));
  }
  return tr;
}

// Logits fed to cross entropy: the pre-softmax values for a Softmax head,
// otherwise the layer output itself.
const Tensor& ce_logits(const ModelSpec& spec, const Trace& tr) {
  return spec.layers.back().activation == Activation::Softmax ? tr.pre.back() : tr.post.back();
}

void check_targets(const ModelSpec& spec, const Tensor& out, const Targets& targets) {
  if (spec.loss == Loss::CrossEntropy) {
    const auto* labels = std::get_if<ClassLabels>(&targets);
    if (labels == nullptr) throw DimensionError("cross entropy needs class-index targets");
    if (labels->size() != out.rows()) {
      throw DimensionError("got " + std::to_string(labels->size()) + " labels for " +
                           std::to_string(out.rows()) + " rows");
    }
    for (auto y : *labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= out.cols()) {
        throw DimensionError("class index " + std::to_string(y) + " outside [0, " +
                             std::to_string(out.cols()) + ")");
      }
    }
  } else {
    const auto* t = std::get_if<Tensor>(&targets);
    if (t == nullptr) throw DimensionError("mse needs a real-valued target matrix");
    if (t->rows() != out.rows() || t->cols() != out.cols()) {
      throw DimensionError("target shape " + t->shape_string() + " does not match output " +
                           out.shape_string());
    }
  }
}

std::vector<float> losses_from_trace(const ModelSpec& spec, const Trace& tr,
                                     const Targets& targets) {
  const Tensor& out = tr.post.back();
  check_targets(spec, out, targets);
  std::vector<float> losses(out.rows());
  if (spec.loss == Loss::CrossEntropy) {
    const auto& labels = std::get<ClassLabels>(targets);
    const Tensor& z = ce_logits(spec, tr);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const auto r = z.row(i);
      const float m = *std::max_element(r.begin(), r.end());
      float sum = 0.0f;
      for (float v : r) sum += std::exp(v - m);
      losses[i] = m + std::log(sum) - r[static_cast<std::size_t>(labels[i])];
    }
  } else {
    const auto& t = std::get<Tensor>(targets);
    const float inv_cols = 1.0f / static_cast<float>(out.cols());
    for (std::size_t i = 0; i < out.rows(); ++i) {
      float s = 0.0f;
      for (std::size_t j = 0; j < out.cols(); ++j) {
        const float d = out(i, j) - t(i, j);
        s += d * d;
      }
      losses[i] = s * inv_cols;
    }
  }
  return losses;
}

float mean(const std::vector<float>& v) {
  float s = 0.0f;
  for (float x : v) s += x;
  return s / static_cast<float>(v.size());
}

}  // namespace

Tensor model_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                     const KernelOptions& opts) {
  require_batch(spec, batch);
  check_shapes(spec, params);
  Tensor a = batch;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    Tensor z = matmul(a, params.layers[l].weight, opts);
    add_row_bias(z, params.layers[l].bias);
    apply_activation(spec.layers[l].activation, z);
    a = std::move(z);
  }
  return a;
}

std::vector<float> row_losses(const ModelSpec& spec, const ModelParams& params,
                              const Tensor& batch, const Targets& targets,
                              const KernelOptions& opts) {
  require_batch(spec, batch);
  check_shapes(spec, params);
  return losses_from_trace(spec, forward_trace(spec, params, batch, opts), targets);
}

float model_loss(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                 const Targets& targets, const KernelOptions& opts) {
  if (batch.rows() == 0) throw DimensionError("loss of an empty batch is undefined");
  return mean(row_losses(spec, params, batch, targets, opts));
}

Gradients model_backward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                         const Targets& targets, const KernelOptions& opts) {
  require_batch(spec, batch);
  check_shapes(spec, params);
  if (batch.rows() == 0) throw DimensionError("cannot compute gradients of an empty batch");

  const Trace tr = forward_trace(spec, params, batch, opts);
  Gradients out;
  out.loss = mean(losses_from_trace(spec, tr, targets));
  out.grads = zeros_like(spec);

  const std::size_t n_layers = spec.layers.size();
  const float inv_rows = 1.0f / static_cast<float>(batch.rows());

  // dz holds dLoss/d(pre-activation) of the layer being processed.
  Tensor dz;
  {
    const Tensor& y = tr.post.back();
    const Activation head = spec.layers.back().activation;
    if (spec.loss == Loss::CrossEntropy) {
      const auto& labels = std::get<ClassLabels>(targets);
      const Tensor& logits = ce_logits(spec, tr);
      Tensor p = logits;
      softmax_rows(p);
      for (std::size_t i = 0; i < p.rows(); ++i) {
        p(i, static_cast<std::size_t>(labels[i])) -= 1.0f;
        for (float& v : p.row(i)) v *= inv_rows;
      }
      // p is now dLoss/dlogits.
      if (head == Activation::Softmax || head == Activation::Identity) {
        dz = std::move(p);
      } else {  // ReLU head: logits are the post-activation values
        for (std::size_t k = 0; k < p.size(); ++k) {
          if (!(tr.pre.back().data()[k] > 0.0f)) p.data()[k] = 0.0f;
        }
        dz = std::move(p);
      }
    } else {
      const auto& t = std::get<Tensor>(targets);
      const float scale = 2.0f * inv_rows / static_cast<float>(y.cols());
      Tensor dy(y.rows(), y.cols());
      for (std::size_t k = 0; k < y.size(); ++k) dy.data()[k] = (y.data()[k] - t.data()[k]) * scale;
      if (head == Activation::Identity) {
        dz = std::move(dy);
      } else if (head == Activation::ReLU) {
        for (std::size_t k = 0; k < dy.size(); ++k) {
          if (!(tr.pre.back().data()[k] > 0.0f)) dy.data()[k] = 0.0f;
        }
        dz = std::move(dy);
      } else {  // softmax Jacobian: dz = y * (dy - <dy, y>)
        dz = Tensor(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          float dot = 0.0f;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += dy(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) dz(i, j) = y(i, j) * (dy(i, j) - dot);
        }
      }
    }
  }

  for (std::size_t l = n_layers; l-- > 0;) {
    auto& g = out.grads.layers[l];
    g.weight = matmul(transpose(tr.post[l]), dz, opts);
    auto db = g.bias.row(0);
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      const auto r = dz.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) db[j] += r[j];
    }
    if (l == 0) break;
    Tensor da = matmul(dz, transpose(params.layers[l].weight), opts);
    // Hidden layers are never Softmax (validate() forbids it).
    if (spec.layers[l - 1].activation == Activation::ReLU) {
      const Tensor& z = tr.pre[l - 1];
      for (std::size_t k = 0; k < da.size(); ++k) {
        if (!(z.data()[k] > 0.0f)) da.data()[k] = 0.0f;
      }
    }
    dz = std::move(da);
  }
  return out;
}

void sgd_step(ModelParams& params, const ModelParams& grads, const SgdConfig& cfg) {
  if (params.layers.size() != grads.layers.size()) {
    throw DimensionError("sgd_step: params and grads have different layer counts");
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    if (p.weight.size() != g.weight.size() || p.bias.size() != g.bias.size()) {
      throw DimensionError("sgd_step: shape mismatch in layer " + std::to_string(l));
    }
    for (std::size_t k = 0; k < p.weight.size(); ++k) {
      p.weight.data()[k] -= cfg.learning_rate * g.weight.data()[k];
    }
    for (std::size_t k = 0; k < p.bias.size(); ++k) {
      p.bias.data()[k] -= cfg.learning_rate * g.bias.data()[k];
    }
  }
}

std::vector<float> flatten(const ModelParams& params) {
  std::vector<float> flat;
  flat.reserve(params.parameter_count());
  for (const auto& l : params.layers) {
    flat.insert(flat.end(), l.weight.data().begin(), l.weight.data().end());
    flat.insert(flat.end(), l.bias.data().begin(), l.bias.data().end());
  }
  return flat;
}

void unflatten(std::span<const float> flat, ModelParams& into) {
  if (flat.size() != into.parameter_count()) {
    throw DimensionError("flat vector of " + std::to_string(flat.size()) +
                         " values does not match " + std::to_string(into.parameter_count()) +
                         " parameters");
  }
  std::size_t off = 0;
  for (auto& l : into.layers) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.weight.size(),
                l.weight.data().begin());
    off += l.weight.size();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(),
                l.bias.data().begin());
    off += l.bias.size();
  }
}

std::uint64_t checksum(const ModelParams& params) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&](std::span<const float> values) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& l : params.layers) {
    mix(l.weight.data());
    mix(l.bias.data());
  }
  return h;
}

}  // namespace shardpipe
