#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "shardpipe/cluster.hpp"
#include "shardpipe/nn.hpp"
#include "shardpipe/plan.hpp"
#include "shardpipe/xshards.hpp"

namespace shardpipe {

struct FitConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;  // rows per worker per step
  std::uint64_t seed = 0;
  bool shuffle = false;
  // Collect every replica's parameter checksum after each step.
  bool debug_checksums = false;
  std::size_t threads = 1;  // compute threads per worker
};

// Which columns feed the model. CrossEntropy models take one integer label
// column; MSE models take one label column per output.
struct DataColumns {
  std::vector<std::string> features;
  std::vector<std::string> labels;
};

struct EpochReport {
  double mean_loss = 0.0;  // mean over workers of each worker's mean step loss
  double wall_seconds = 0.0;
  std::size_t steps = 0;
};

struct TrainReport {
  std::vector<EpochReport> epochs;
  // With debug_checksums: step_checksums[step][worker].
  std::vector<std::vector<std::uint64_t>> step_checksums;
  std::size_t checksum_mismatches = 0;
};

std::string to_json(const TrainReport& r);

// "loss" is the model's own training loss and serves as the tuning objective.
enum class Metric { Accuracy, MSE, Loss };
std::string_view to_string(Metric m);
// Throws Error for unknown names.
Metric parse_metric(std::string_view name);

// Data-parallel trainer. Every worker keeps a full replica, trains on its own
// partition and averages gradients with allreduce(Mean) each step. A null
// cluster selects local mode: the same tasks run in-process with one replica.
class Estimator {
 public:
  static Estimator from_model(const ModelSpec& spec, const SgdConfig& sgd,
                              ClusterContext* cluster = nullptr);
  // Restores spec and params from a checkpoint and broadcasts them.
  static Estimator load(const std::filesystem::path& path, const SgdConfig& sgd = {},
                        ClusterContext* cluster = nullptr);

  Estimator(Estimator&&) noexcept;
  Estimator& operator=(Estimator&&) noexcept;
  ~Estimator();

  // Clustered fit needs one non-empty partition per worker; local fit trains
  // on collect(data).
  TrainReport fit(const Shards& data, const DataColumns& cols, const FitConfig& cfg);

  // Adds "prediction" (one output) or "prediction_<j>" columns. Partitioning
  // and row order follow `data`.
  Shards predict(const Shards& data, const std::vector<std::string>& features,
                 const ExecPlan& plan = {});

  // Averaged over every row of `data`.
  double evaluate(const Shards& data, const DataColumns& cols, Metric metric);

  void save(const std::filesystem::path& path) const;

  const ModelSpec& spec() const noexcept;
  const ModelParams& params() const noexcept;
  const SgdConfig& sgd() const noexcept;
  bool distributed() const noexcept;

  // One checksum per replica (one entry in local mode).
  std::vector<std::uint64_t> replica_checksums();

 private:
  struct Impl;
  explicit Estimator(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Names of the prediction columns predict() adds for a model with `outputs`
// outputs.
std::vector<std::string> prediction_columns(std::size_t outputs);

}  // namespace shardpipe
