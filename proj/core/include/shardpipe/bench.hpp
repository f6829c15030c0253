#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "shardpipe/plan.hpp"

namespace shardpipe {

struct BenchEntry {
  ExecPlan plan;
  double latency_ms = 0.0;      // median over repeats
  double throughput_rps = 0.0;  // rows per second at the median latency
  double speedup = 1.0;         // baseline latency / this latency
  double max_dev = 0.0;         // max-abs relative deviation from the baseline output
};

struct BenchReport {
  std::vector<BenchEntry> plans;
  std::size_t host_cores = 1;
};

inline constexpr std::size_t kMinBenchRepeats = 3;

// Times `infer` for every plan: one untimed warmup call, then `repeats` timed
// calls, reporting the median. The fp32 single-thread plan is the baseline;
// it is added at the front when `plans` does not contain it, and its speedup
// is exactly 1.0.
BenchReport benchmark(const InferenceModel& model, const Tensor& data,
                      const std::vector<ExecPlan>& plans, std::size_t repeats);

// {"plans":[{"threads":n,"precision":"fp32"|"int8","block":n,"latency_ms":f,
//   "throughput_rps":f,"speedup":f,"max_dev":f}], "host_cores":n}
std::string to_json(const BenchReport& report);
BenchReport bench_report_from_json(const std::string& text);

}  // namespace shardpipe
