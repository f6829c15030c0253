#include "shardpipe/bench.hpp"

#include <algorithm>
#include <chrono>

#include <json.hpp>

#include "shardpipe/errors.hpp"
#include "shardpipe/thread_pool.hpp"

namespace shardpipe {

namespace {

bool is_baseline(const ExecPlan& p) { return p.threads == 1 && p.precision == Precision::FP32; }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BenchReport benchmark(const InferenceModel& model, const Tensor& data,
                      const std::vector<ExecPlan>& plans, std::size_t repeats) {
  if (repeats < kMinBenchRepeats) {
    throw Error("benchmark needs at least " + std::to_string(kMinBenchRepeats) + " repeats");
  }
  std::vector<ExecPlan> ordered;
  const auto base_it = std::find_if(plans.begin(), plans.end(), is_baseline);
  ordered.push_back(base_it != plans.end() ? *base_it
                                           : ExecPlan{1, Precision::FP32, plans.empty() ? kSmallBlock : plans.front().block_size});
  for (const auto& p : plans) {
    if (!is_baseline(p)) ordered.push_back(p);
  }

  BenchReport report;
  report.host_cores = detected_cores();
  Tensor reference;
  double base_latency = 0.0;
  for (std::size_t idx = 0; idx < ordered.size(); ++idx) {
    const ExecPlan& plan = ordered[idx];
    Tensor out = infer(model, data, plan);  // warmup, excluded
    std::vector<double> samples;
    samples.reserve(repeats);
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      out = infer(model, data, plan);
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchEntry e;
    e.plan = plan;
    e.latency_ms = median(std::move(samples));
    e.throughput_rps = e.latency_ms > 0.0 ? static_cast<double>(data.rows()) / (e.latency_ms / 1e3) : 0.0;
    if (idx == 0) {
      reference = out;
      base_latency = e.latency_ms;
      e.speedup = 1.0;
      e.max_dev = 0.0;
    } else {
      e.speedup = e.latency_ms > 0.0 ? base_latency / e.latency_ms : 0.0;
      e.max_dev = max_abs_relative_deviation(out, reference);
    }
    report.plans.push_back(e);
  }
  return report;
}

std::string to_json(const BenchReport& report) {
  nlohmann::json j;
  j["plans"] = nlohmann::json::array();
  for (const auto& e : report.plans) {
    j["plans"].push_back({{"threads", e.plan.threads},
                          {"precision", std::string(to_string(e.plan.precision))},
                          {"block", e.plan.block_size},
                          {"latency_ms", e.latency_ms},
                          {"throughput_rps", e.throughput_rps},
                          {"speedup", e.speedup},
                          {"max_dev", e.max_dev}});
  }
  j["host_cores"] = report.host_cores;
  return j.dump();
}

BenchReport bench_report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    BenchReport r;
    r.host_cores = j.at("host_cores").get<std::size_t>();
    for (const auto& p : j.at("plans")) {
      BenchEntry e;
      e.plan.threads = p.at("threads").get<std::size_t>();
      const auto prec = parse_precision(p.at("precision").get<std::string>());
      if (!prec) throw DataError("unknown precision in bench report");
      e.plan.precision = *prec;
      e.plan.block_size = p.at("block").get<std::size_t>();
      e.latency_ms = p.at("latency_ms").get<double>();
      e.throughput_rps = p.at("throughput_rps").get<double>();
      e.speedup = p.at("speedup").get<double>();
      e.max_dev = p.at("max_dev").get<double>();
      r.plans.push_back(e);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid bench report JSON: ") + e.what());
  }
}

}  // namespace shardpipe
