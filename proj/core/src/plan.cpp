#include "shardpipe/plan.hpp"

#include <algorithm>

#include "shardpipe/errors.hpp"

namespace shardpipe {

std::string_view to_string(Precision p) { return p == Precision::INT8 ? "int8" : "fp32"; }

std::optional<Precision> parse_precision(std::string_view s) {
  if (s == "fp32") return Precision::FP32;
  if (s == "int8") return Precision::INT8;
  return std::nullopt;
}

PlanChoice select_plan(std::size_t cores, const ModelSpec& spec, std::size_t batch,
                       bool want_int8, bool have_quantized) {
  PlanChoice choice;
  const std::size_t wanted = (batch + kRowsPerThread - 1) / kRowsPerThread;
  choice.plan.threads = std::max<std::size_t>(1, std::min(std::max<std::size_t>(cores, 1), wanted));

  std::size_t largest = 0;
  for (const auto& l : spec.layers) largest = std::max({largest, l.input_dim, l.output_dim});
  choice.plan.block_size = largest >= kLargeDimThreshold ? kLargeBlock : kSmallBlock;

  if (want_int8 && have_quantized) {
    choice.plan.precision = Precision::INT8;
  } else {
    choice.plan.precision = Precision::FP32;
    choice.int8_unavailable = want_int8;
  }
  return choice;
}

Tensor infer(const InferenceModel& model, const Tensor& batch, const ExecPlan& plan) {
  if (batch.cols() != model.spec.input_dim()) {
    throw DimensionError("batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(model.spec.input_dim()));
  }
  if (batch.rows() == 0) return Tensor(0, model.spec.output_dim());
  if (plan.precision == Precision::INT8) {
    if (!model.quantized) throw ModelError("int8 plan requested but the model is not quantized");
    return quantized_forward(*model.quantized, batch, plan.kernel());
  }
  return model_forward(model.spec, model.params, batch, plan.kernel());
}

}  // namespace shardpipe
