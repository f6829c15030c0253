#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "shardpipe/arch.hpp"
#include "shardpipe/bench.hpp"
#include "shardpipe/checkpoint.hpp"
#include "shardpipe/cluster.hpp"
#include "shardpipe/csv.hpp"
#include "shardpipe/estimator.hpp"
#include "shardpipe/hpo.hpp"
#include "shardpipe/log.hpp"
#include "shardpipe/quant.hpp"
#include "shardpipe/tasks.hpp"
#include "shardpipe/thread_pool.hpp"
#include "shardpipe/worker.hpp"

namespace sp = shardpipe;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitParse = 1;
constexpr int kExitData = 2;
constexpr int kExitCluster = 3;
constexpr int kExitInterrupted = 130;

extern "C" void on_sigint(int) { sp::request_interrupt(); }

struct CommonData {
  std::string data;
  std::vector<std::string> labels;
  std::vector<std::string> features;
};

void add_data_options(CLI::App* cmd, CommonData& d, bool data_required = true) {
  auto* opt = cmd->add_option("--data", d.data, "CSV file with a header row");
  if (data_required) opt->required();
  cmd->add_option("--label", d.labels, "Label column(s); comma separated or repeated")
      ->delimiter(',');
  cmd->add_option("--features", d.features, "Feature columns (default: every non-label column)")
      ->delimiter(',');
}

std::vector<std::string> feature_columns(const sp::Schema& schema, const CommonData& d) {
  if (!d.features.empty()) return d.features;
  std::vector<std::string> out;
  for (const auto& c : schema) {
    if (std::find(d.labels.begin(), d.labels.end(), c.name) != d.labels.end()) continue;
    if (c.kind == sp::ColumnKind::String) {
      throw sp::DataError("column '" + c.name + "' is not numeric; pass --features explicitly");
    }
    out.push_back(c.name);
  }
  return out;
}

std::optional<sp::Loss> loss_flag(const std::string& s) {
  if (s.empty()) return std::nullopt;
  auto l = sp::parse_loss(s);
  if (!l) throw sp::ArchParseError(s, "unknown loss (use mse or ce)");
  return l;
}

// Launches workers only when more than one is requested; one worker runs
// in-process.
std::unique_ptr<sp::ClusterContext> maybe_launch(std::size_t workers) {
  if (workers <= 1) return nullptr;
  sp::ClusterConfig cfg;
  cfg.n_workers = workers;
  return sp::ClusterContext::launch(cfg);
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

struct TrainFlags {
  CommonData data;
  std::string arch;
  std::string loss;
  std::size_t workers = 1;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool shuffle = false;
  std::size_t threads = 1;
  std::string out = "model.spnn";
};

int cmd_train(const TrainFlags& f) {
  const sp::ModelSpec spec = sp::parse_arch(f.arch, loss_flag(f.loss));
  const sp::Shards data = sp::read_csv(f.data.data, f.workers);
  sp::DataColumns cols{feature_columns(data.schema(), f.data), f.data.labels};
  if (cols.labels.empty()) throw sp::DataError("--label is required");

  auto cluster = maybe_launch(f.workers);
  sp::SgdConfig sgd{static_cast<float>(f.lr), f.seed};
  auto est = sp::Estimator::from_model(spec, sgd, cluster.get());
  sp::FitConfig fit;
  fit.epochs = f.epochs;
  fit.batch_size = f.batch;
  fit.seed = f.seed;
  fit.shuffle = f.shuffle;
  fit.threads = f.threads;
  const sp::TrainReport report = est.fit(data, cols, fit);
  est.save(f.out);
  if (cluster) cluster->shutdown();

  json j = json::parse(sp::to_json(report));
  j["arch"] = sp::format_arch(spec);
  j["workers"] = f.workers;
  j["checkpoint"] = f.out;
  print(j);
  return 0;
}

struct QuantizeFlags {
  std::string model;
  CommonData calib;
  std::string out = "model.spq8";
};

int cmd_quantize(const QuantizeFlags& f) {
  const sp::Checkpoint ckpt = sp::load_checkpoint(f.model);
  const sp::RecordBatch calib = sp::collect(sp::read_csv(f.calib.data, 1));
  const auto features = feature_columns(calib.schema(), f.calib);
  const sp::Tensor x = sp::to_tensor(calib, features);
  if (x.cols() != ckpt.spec.input_dim()) {
    throw sp::DimensionError("model expects " + std::to_string(ckpt.spec.input_dim()) +
                             " features, calibration data has " + std::to_string(x.cols()));
  }
  const sp::QuantizedModel q = sp::quantize_model(ckpt.spec, ckpt.params, std::span(&x, 1));
  sp::save_quantized(f.out, q);
  const double dev = sp::max_abs_relative_deviation(sp::quantized_forward(q, x),
                                                    sp::model_forward(ckpt.spec, ckpt.params, x));
  print(json{{"output", f.out}, {"calibration_rows", x.rows()}, {"max_deviation", dev}});
  return 0;
}

struct BenchFlags {
  std::string model;
  std::string arch = "784-512-512-10:relu,relu,softmax";
  std::string quantized;
  std::size_t batch = 256;
  std::size_t repeats = 5;
  std::size_t max_threads = 0;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchFlags& f) {
  sp::InferenceModel m;
  if (!f.model.empty()) {
    sp::Checkpoint c = sp::load_checkpoint(f.model);
    m.spec = std::move(c.spec);
    m.params = std::move(c.params);
  } else {
    m.spec = sp::parse_arch(f.arch);
    m.params = sp::init_params(m.spec, f.seed);
  }
  if (!f.quantized.empty()) {
    m.quantized = sp::load_quantized(f.quantized);
    if (m.quantized->spec != m.spec) throw sp::ModelError("quantized model does not match the fp32 model");
  }
  if (f.repeats < sp::kMinBenchRepeats) {
    throw sp::Error("--repeats must be at least " + std::to_string(sp::kMinBenchRepeats));
  }

  sp::Tensor x(f.batch, m.spec.input_dim());
  std::mt19937_64 rng(f.seed);
  for (float& v : x.data()) v = static_cast<float>(rng() >> 40) * 0x1.0p-24f;

  const std::size_t cores = f.max_threads ? f.max_threads : sp::detected_cores();
  std::vector<sp::ExecPlan> plans;
  for (sp::Precision p : {sp::Precision::FP32, sp::Precision::INT8}) {
    if (p == sp::Precision::INT8 && !m.quantized) continue;
    for (std::size_t t = 1; t <= cores; ++t) plans.push_back({t, p, sp::kLargeBlock});
  }
  const sp::BenchReport report = sp::benchmark(m, x, plans, f.repeats);
  std::cout << json::parse(sp::to_json(report)).dump(2) << std::endl;
  return 0;
}

struct TuneFlags {
  CommonData data;
  std::string arch;
  std::string lr = "0.01";
  std::string loss;
  std::string space;
  std::size_t workers = 1;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  std::size_t budget = 10;
  std::string sampler = "random";
  std::string study_out = "study.json";
  std::string out = "best.spnn";
};

int cmd_tune(const TuneFlags& f) {
  std::vector<sp::NamedSpace> spaces;
  if (!f.space.empty()) {
    std::ifstream in(f.space);
    if (!in) throw sp::DataError("cannot open space file " + f.space);
    std::stringstream ss;
    ss << in.rdbuf();
    spaces = sp::parse_spaces_json(ss.str());
  }
  sp::RealLeaf lr;
  if (!f.lr.empty() && f.lr.front() == '$') {
    lr = sp::Placeholder{f.lr.substr(1)};
  } else {
    try {
      lr = std::stod(f.lr);
    } catch (const std::exception&) {
      throw sp::ArchParseError(f.lr, "learning rate must be a number or a $placeholder");
    }
  }
  sp::ModelTemplate tmpl(f.arch, lr, spaces, loss_flag(f.loss), f.seed);

  const sp::Shards data = sp::read_csv(f.data.data, 1);
  sp::DataColumns cols{feature_columns(data.schema(), f.data), f.data.labels};
  if (cols.labels.empty()) throw sp::DataError("--label is required");

  sp::Study study;
  study.budget = f.budget;
  if (f.sampler == "grid") {
    study.sampler = sp::GridSampler{};
  } else {
    study.sampler = sp::RandomSampler{f.seed};
  }

  sp::FitConfig fit;
  fit.epochs = f.epochs;
  fit.batch_size = f.batch;
  fit.seed = f.seed;

  auto cluster = maybe_launch(f.workers);
  sp::AutoFitResult res = sp::auto_estimator_fit(tmpl, data, cols, fit, std::move(study), cluster.get());
  res.estimator.save(f.out);
  if (cluster) cluster->shutdown();

  const std::string study_json = sp::to_json(res.study);
  std::ofstream(f.study_out) << study_json << '\n';
  json j{{"study", json::parse(study_json)}, {"study_file", f.study_out}, {"checkpoint", f.out}};
  print(j);
  return 0;
}

int cmd_cluster_check(std::size_t workers) {
  sp::ClusterConfig cfg;
  cfg.n_workers = workers;
  auto cluster = sp::ClusterContext::launch(cfg);
  json echo = json::array();
  for (const auto& r : cluster->run_task("echo")) echo.push_back(sp::decode_i32(r));
  cluster->barrier();
  json pids = cluster->worker_pids();
  cluster->shutdown();
  print(json{{"workers", workers}, {"pids", pids}, {"echo", echo}, {"state", sp::to_string(cluster->state())}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (auto code = sp::maybe_run_worker(argc, argv)) return *code;
  sp::init_logging();
  std::signal(SIGINT, on_sigint);

  CLI::App app{"shardpipe: data-parallel training, int8 inference and tuning on a local cluster"};
  app.require_subcommand(1);
  app.footer(
      "Architectures are written d0-d1-...-dk:act1,...,actk, for example\n"
      "784-64-10:relu,softmax. Activations: relu, softmax, id. JSON results go to\n"
      "stdout, logs to stderr (level from SHARDPIPE_LOG). Exit codes: 0 ok,\n"
      "1 bad arguments, 2 data or checkpoint error, 3 cluster error, 130 interrupted.");

  TrainFlags train;
  auto* c_train = app.add_subcommand("train", "Fit a model on a CSV file and save a checkpoint");
  add_data_options(c_train, train.data);
  c_train->add_option("--arch", train.arch, "Architecture string")->required();
  c_train->add_option("--loss", train.loss, "mse or ce (default: ce for a softmax head, else mse)");
  c_train->add_option("--workers", train.workers, "Worker processes")->check(CLI::PositiveNumber);
  c_train->add_option("--epochs", train.epochs)->check(CLI::PositiveNumber);
  c_train->add_option("--batch-size", train.batch, "Rows per worker per step")->check(CLI::PositiveNumber);
  c_train->add_option("--lr", train.lr, "SGD learning rate");
  c_train->add_option("--seed", train.seed);
  c_train->add_flag("--shuffle", train.shuffle, "Shuffle each worker's rows every epoch");
  c_train->add_option("--threads", train.threads, "Compute threads per worker")->check(CLI::PositiveNumber);
  c_train->add_option("--out", train.out, "Checkpoint path");

  QuantizeFlags quant;
  auto* c_quant = app.add_subcommand("quantize", "Calibrate and write an int8 model");
  c_quant->add_option("--model", quant.model, "fp32 checkpoint")->required();
  c_quant->add_option("--calib", quant.calib.data, "Calibration CSV")->required();
  c_quant->add_option("--label", quant.calib.labels, "Columns to ignore")->delimiter(',');
  c_quant->add_option("--features", quant.calib.features)->delimiter(',');
  c_quant->add_option("--out", quant.out, "Quantized model path");

  BenchFlags bench;
  auto* c_bench = app.add_subcommand("bench", "Time inference across thread counts and precisions");
  c_bench->add_option("--model", bench.model, "fp32 checkpoint (default: random weights for --arch)");
  c_bench->add_option("--arch", bench.arch);
  c_bench->add_option("--quantized", bench.quantized, "Quantized model; adds int8 plans");
  c_bench->add_option("--batch", bench.batch)->check(CLI::PositiveNumber);
  c_bench->add_option("--repeats", bench.repeats);
  c_bench->add_option("--max-threads", bench.max_threads, "Default: detected cores");
  c_bench->add_option("--seed", bench.seed);

  TuneFlags tune;
  auto* c_tune = app.add_subcommand("tune", "Search hyperparameters, then refit the best config");
  add_data_options(c_tune, tune.data);
  c_tune->add_option("--arch", tune.arch, "Architecture; tokens may be $name placeholders")->required();
  c_tune->add_option("--lr", tune.lr, "Learning rate or $name");
  c_tune->add_option("--loss", tune.loss);
  c_tune->add_option("--space", tune.space, "Search space JSON file");
  c_tune->add_option("--workers", tune.workers)->check(CLI::PositiveNumber);
  c_tune->add_option("--epochs", tune.epochs)->check(CLI::PositiveNumber);
  c_tune->add_option("--batch-size", tune.batch)->check(CLI::PositiveNumber);
  c_tune->add_option("--seed", tune.seed);
  c_tune->add_option("--budget", tune.budget, "Trial count")->check(CLI::PositiveNumber);
  c_tune->add_option("--sampler", tune.sampler)->check(CLI::IsMember({"random", "grid"}));
  c_tune->add_option("--study-out", tune.study_out, "Study JSON path");
  c_tune->add_option("--out", tune.out, "Checkpoint path for the refit model");

  std::size_t check_workers = 2;
  auto* c_cluster = app.add_subcommand("cluster", "Cluster management");
  c_cluster->require_subcommand(1);
  auto* c_check = c_cluster->add_subcommand("check", "Launch workers, run echo and a barrier, shut down");
  c_check->add_option("--workers", check_workers)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitParse;
  }

  try {
    if (*c_train) return cmd_train(train);
    if (*c_quant) return cmd_quantize(quant);
    if (*c_bench) return cmd_bench(bench);
    if (*c_tune) return cmd_tune(tune);
    if (*c_check) return cmd_cluster_check(check_workers);
  } catch (const sp::Interrupted&) {
    spdlog::error("interrupted; workers shut down");
    return kExitInterrupted;
  } catch (const sp::ArchParseError& e) {
    spdlog::error("{}", e.what());
    return kExitParse;
  } catch (const sp::SearchError& e) {
    spdlog::error("{}", e.what());
    return kExitParse;
  } catch (const sp::ClusterError& e) {
    spdlog::error("{}", e.what());
    return kExitCluster;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  }
  return kExitParse;
}
