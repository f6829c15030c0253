#include <benchmark/benchmark.h>

#include <random>

#include "shardpipe/arch.hpp"
#include "shardpipe/plan.hpp"
#include "shardpipe/quant.hpp"
#include "shardpipe/tensor.hpp"

namespace sp = shardpipe;

namespace {

sp::Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  sp::Tensor t(r, c);
  for (float& v : t.data()) v = static_cast<float>(rng() >> 40) * 0x1.0p-24f - 0.5f;
  return t;
}

// args: size, threads, block
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const sp::Tensor a = random_tensor(n, n, 1);
  const sp::Tensor b = random_tensor(n, n, 2);
  const sp::KernelOptions opts{static_cast<std::size_t>(state.range(1)), static_cast<std::size_t>(state.range(2))};
  for (auto _ : state) benchmark::DoNotOptimize(sp::matmul(a, b, opts));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->ArgsProduct({{128, 256}, {1, 2, 4}, {32, 64}})->UseRealTime();

const sp::InferenceModel& mlp() {
  static const sp::InferenceModel m = [] {
    sp::InferenceModel im{sp::parse_arch("784-512-512-10:relu,relu,softmax"), {}, std::nullopt};
    im.params = sp::init_params(im.spec, 5);
    const sp::Tensor calib = random_tensor(128, 784, 3);
    im.quantized = sp::quantize_model(im.spec, im.params, std::span(&calib, 1));
    return im;
  }();
  return m;
}

// args: threads, precision (0 fp32, 1 int8)
void BM_Infer(benchmark::State& state) {
  const sp::Tensor x = random_tensor(256, 784, 4);
  const sp::ExecPlan plan{static_cast<std::size_t>(state.range(0)),
                          state.range(1) ? sp::Precision::INT8 : sp::Precision::FP32, sp::kLargeBlock};
  for (auto _ : state) benchmark::DoNotOptimize(sp::infer(mlp(), x, plan));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_Infer)->ArgsProduct({{1, 2, 4}, {0, 1}})->UseRealTime()->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
