#include <gtest/gtest.h>

#include <random>

#include "shardpipe/arch.hpp"
#include "shardpipe/bench.hpp"
#include "shardpipe/errors.hpp"
#include "shardpipe/plan.hpp"

using namespace shardpipe;

namespace {

Tensor uniform(std::size_t r, std::size_t c, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  Tensor t(r, c);
  for (float& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

TEST(SelectPlan, ThreadsFollowBatchAndCores) {
  const ModelSpec small = parse_arch("8-8-2:relu,id");
  EXPECT_EQ(select_plan(8, small, 1, false, false).plan.threads, 1u);
  EXPECT_EQ(select_plan(8, small, 16, false, false).plan.threads, 1u);
  EXPECT_EQ(select_plan(8, small, 17, false, false).plan.threads, 2u);
  EXPECT_EQ(select_plan(8, small, 1000, false, false).plan.threads, 8u);
  EXPECT_EQ(select_plan(0, small, 1000, false, false).plan.threads, 1u);
  EXPECT_EQ(select_plan(4, small, 0, false, false).plan.threads, 1u);
}

TEST(SelectPlan, BlockAndPrecision) {
  const ModelSpec small = parse_arch("8-255-2:relu,id");
  const ModelSpec large = parse_arch("8-256-2:relu,id");
  EXPECT_EQ(select_plan(1, small, 4, false, false).plan.block_size, kSmallBlock);
  EXPECT_EQ(select_plan(1, large, 4, false, false).plan.block_size, kLargeBlock);

  const PlanChoice want = select_plan(1, small, 4, true, true);
  EXPECT_EQ(want.plan.precision, Precision::INT8);
  EXPECT_FALSE(want.int8_unavailable);
  const PlanChoice missing = select_plan(1, small, 4, true, false);
  EXPECT_EQ(missing.plan.precision, Precision::FP32);
  EXPECT_TRUE(missing.int8_unavailable);
  EXPECT_EQ(select_plan(1, small, 4, false, true).plan.precision, Precision::FP32);
}

TEST(Infer, Fp32OutputIsThreadInvariant) {
  InferenceModel m{parse_arch("30-50-5:relu,softmax"), {}, std::nullopt};
  m.params = init_params(m.spec, 12);
  const Tensor x = uniform(70, 30, 5);
  const Tensor ref = infer(m, x, {});
  for (std::size_t t : {2, 3, 4}) {
    for (std::size_t b : {8, 64}) EXPECT_EQ(infer(m, x, {t, Precision::FP32, b}), ref);
  }
  EXPECT_THROW(infer(m, x, {1, Precision::INT8, 32}), ModelError);
  EXPECT_THROW(infer(m, Tensor(2, 3), {}), DimensionError);
  EXPECT_EQ(infer(m, Tensor(0, 30), {}).cols(), 5u);
}

TEST(Infer, Int8OutputIsThreadInvariant) {
  InferenceModel m{parse_arch("30-50-5:relu,id"), {}, std::nullopt};
  m.params = init_params(m.spec, 12);
  const Tensor calib = uniform(40, 30, 1);
  m.quantized = quantize_model(m.spec, m.params, std::span(&calib, 1));
  const Tensor x = uniform(70, 30, 2);
  const Tensor ref = infer(m, x, {1, Precision::INT8, 32});
  for (std::size_t t : {2, 4}) EXPECT_EQ(infer(m, x, {t, Precision::INT8, 32}), ref);
}

TEST(Bench, BaselineFirstAndJsonRoundTrip) {
  InferenceModel m{parse_arch("16-16-4:relu,id"), {}, std::nullopt};
  m.params = init_params(m.spec, 2);
  const Tensor x = uniform(32, 16, 3);
  const BenchReport r = benchmark(m, x, {{2, Precision::FP32, 32}}, 3);
  ASSERT_EQ(r.plans.size(), 2u);
  EXPECT_EQ(r.plans[0].plan, (ExecPlan{1, Precision::FP32, 32}));
  EXPECT_EQ(r.plans[0].speedup, 1.0);
  EXPECT_EQ(r.plans[0].max_dev, 0.0);
  EXPECT_EQ(r.plans[1].max_dev, 0.0);
  for (const auto& e : r.plans) {
    EXPECT_GT(e.latency_ms, 0.0);
    EXPECT_NEAR(e.throughput_rps, 32.0 / (e.latency_ms / 1000.0), 1e-6 * e.throughput_rps);
  }

  const BenchReport back = bench_report_from_json(to_json(r));
  ASSERT_EQ(back.plans.size(), r.plans.size());
  EXPECT_EQ(back.host_cores, r.host_cores);
  for (std::size_t i = 0; i < r.plans.size(); ++i) {
    EXPECT_EQ(back.plans[i].plan, r.plans[i].plan);
    EXPECT_DOUBLE_EQ(back.plans[i].latency_ms, r.plans[i].latency_ms);
    EXPECT_DOUBLE_EQ(back.plans[i].speedup, r.plans[i].speedup);
  }
}

TEST(Bench, RejectsTooFewRepeats) {
  InferenceModel m{parse_arch("2-1:id"), {}, std::nullopt};
  m.params = init_params(m.spec, 2);
  EXPECT_ANY_THROW(benchmark(m, Tensor(4, 2), {}, kMinBenchRepeats - 1));
}
