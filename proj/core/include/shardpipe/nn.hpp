#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "shardpipe/tensor.hpp"

namespace shardpipe {

enum class Activation : std::uint8_t { Identity = 0, ReLU = 1, Softmax = 2 };
enum class Loss : std::uint8_t { MSE = 0, CrossEntropy = 1 };

std::string_view to_string(Activation a);
std::string_view to_string(Loss l);

struct LayerSpec {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Activation activation = Activation::Identity;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  Loss loss = Loss::MSE;

  std::size_t input_dim() const { return layers.front().input_dim; }
  std::size_t output_dim() const { return layers.back().output_dim; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Throws ModelError when the spec is empty, a dim is zero, adjacent layers do
// not chain, or Softmax appears before the final layer.
void validate(const ModelSpec& spec);

struct DenseParams {
  Tensor weight;  // input_dim × output_dim
  Tensor bias;    // 1 × output_dim

  friend bool operator==(const DenseParams&, const DenseParams&) = default;
};

struct ModelParams {
  std::vector<DenseParams> layers;

  std::size_t parameter_count() const;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Throws ModelError unless every tensor in `params` has the shape `spec` asks for.
void check_shapes(const ModelSpec& spec, const ModelParams& params);

// Zero-valued params shaped like `spec`.
ModelParams zeros_like(const ModelSpec& spec);

struct SgdConfig {
  float learning_rate = 0.01f;
  std::uint64_t seed = 0;
};

// CrossEntropy takes class indices; MSE takes a real matrix shaped like the
// model output.
using ClassLabels = std::vector<std::int32_t>;
using Targets = std::variant<ClassLabels, Tensor>;

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] weights, zero biases.
// Bit-identical for the same (spec, seed) on every host running this build.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed);

Tensor model_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                     const KernelOptions& opts = {});

struct Gradients {
  float loss = 0.0f;
  ModelParams grads;
};

// Mean loss over batch rows and its gradient with respect to every parameter.
// CrossEntropy consumes the final layer's pre-activation as logits, so a final
// Softmax and an Identity head produce the same loss.
Gradients model_backward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                         const Targets& targets, const KernelOptions& opts = {});

// Mean loss only (forward pass). Same definition model_backward reports.
float model_loss(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                 const Targets& targets, const KernelOptions& opts = {});

// Per-row loss values; model_loss is their mean.
std::vector<float> row_losses(const ModelSpec& spec, const ModelParams& params,
                              const Tensor& batch, const Targets& targets,
                              const KernelOptions& opts = {});

// w <- w - lr * g, element by element, in place.
void sgd_step(ModelParams& params, const ModelParams& grads, const SgdConfig& cfg);

// Flattened view used for gradient synchronization: per layer, weight then
// bias, row-major.
std::vector<float> flatten(const ModelParams& params);
void unflatten(std::span<const float> flat, ModelParams& into);

// FNV-1a over the raw bytes of every parameter tensor, in flatten order.
std::uint64_t checksum(const ModelParams& params);

}  // namespace shardpipe
