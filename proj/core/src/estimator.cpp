#include "shardpipe/estimator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "shardpipe/checkpoint.hpp"
#include "shardpipe/errors.hpp"
#include "shardpipe/worker.hpp"
#include "task_table.hpp"

namespace shardpipe {

namespace {

void put_strings(ByteWriter& w, const std::vector<std::string>& v) {
  w.put(static_cast<std::uint32_t>(v.size()));
  for (const auto& s : v) w.put_string(s);
}

std::vector<std::string> get_strings(ByteReader<>& r) {
  const auto n = r.get<std::uint32_t>();
  std::vector<std::string> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(r.get_string());
  return out;
}

Bytes encode_model(const ModelSpec& spec, const ModelParams& params, const SgdConfig& sgd) {
  ByteWriter w;
  w.put_blob(encode_checkpoint(spec, params));
  w.put(sgd.learning_rate);
  w.put(sgd.seed);
  return w.take();
}

struct TrainArgs {
  std::uint64_t epoch = 0;
  std::uint64_t steps = 0;
  std::uint64_t batch = 1;
  std::uint64_t seed = 0;
  bool shuffle = false;
  bool debug = false;
  std::uint32_t threads = 1;
  DataColumns cols;
};

Bytes encode(const TrainArgs& a) {
  ByteWriter w;
  w.put(a.epoch);
  w.put(a.steps);
  w.put(a.batch);
  w.put(a.seed);
  w.put(static_cast<std::uint8_t>(a.shuffle));
  w.put(static_cast<std::uint8_t>(a.debug));
  w.put(a.threads);
  put_strings(w, a.cols.features);
  put_strings(w, a.cols.labels);
  return w.take();
}

TrainArgs decode_train_args(std::span<const std::byte> b) {
  ByteReader r(b);
  TrainArgs a;
  a.epoch = r.get<std::uint64_t>();
  a.steps = r.get<std::uint64_t>();
  a.batch = r.get<std::uint64_t>();
  a.seed = r.get<std::uint64_t>();
  a.shuffle = r.get<std::uint8_t>() != 0;
  a.debug = r.get<std::uint8_t>() != 0;
  a.threads = r.get<std::uint32_t>();
  a.cols.features = get_strings(r);
  a.cols.labels = get_strings(r);
  return a;
}

Bytes encode_predict_args(const std::vector<std::string>& features, const ExecPlan& plan) {
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(plan.precision));
  w.put(static_cast<std::uint32_t>(plan.threads));
  w.put(static_cast<std::uint32_t>(plan.block_size));
  put_strings(w, features);
  return w.take();
}

Bytes encode_eval_args(const DataColumns& cols, Metric metric) {
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(metric));
  put_strings(w, cols.features);
  put_strings(w, cols.labels);
  return w.take();
}

ModelReplica& require_model(WorkerState& st) {
  if (!st.model) throw ModelError("worker " + std::to_string(st.id) + " holds no model");
  return *st.model;
}

const RecordBatch& require_partition(WorkerState& st) {
  if (!st.partition) throw DataError("worker " + std::to_string(st.id) + " holds no partition");
  return *st.partition;
}

Targets make_targets(const ModelSpec& spec, const RecordBatch& batch,
                     const std::vector<std::string>& labels) {
  if (spec.loss == Loss::CrossEntropy) {
    if (labels.size() != 1) {
      throw DataError("cross-entropy models take exactly one label column, got " +
                      std::to_string(labels.size()));
    }
    ClassLabels y = to_labels(batch, labels.front());
    for (auto v : y) {
      if (static_cast<std::size_t>(v) >= spec.output_dim()) {
        throw DataError("label " + std::to_string(v) + " out of range for " +
                        std::to_string(spec.output_dim()) + " classes");
      }
    }
    return y;
  }
  if (labels.size() != spec.output_dim()) {
    throw DataError("MSE model with " + std::to_string(spec.output_dim()) + " outputs needs " +
                    std::to_string(spec.output_dim()) + " label columns, got " +
                    std::to_string(labels.size()));
  }
  return to_tensor(batch, labels);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  Tensor out(idx.size(), t.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(t.row(idx[i]).begin(), t.row(idx[i]).end(), out.row(i).begin());
  }
  return out;
}

Targets gather_targets(const Targets& t, std::span<const std::size_t> idx) {
  if (const auto* labels = std::get_if<ClassLabels>(&t)) {
    ClassLabels out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = (*labels)[idx[i]];
    return out;
  }
  return gather_rows(std::get<Tensor>(t), idx);
}

// Fisher-Yates over mt19937_64 so the order is the same with every standard
// library.
void shuffle_indices(std::vector<std::size_t>& order, std::uint64_t seed, int worker,
                     std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(worker), static_cast<std::uint32_t>(epoch),
                    static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

std::size_t argmax_row(std::span<const float> row) {
  if (row.size() == 1) return row[0] >= 0.5f ? 1 : 0;
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Bytes task_load_model(TaskContext& ctx, std::span<const std::byte>) {
  ByteReader r(ctx.state.broadcast);
  const Bytes ckpt = r.get_blob();
  Checkpoint c = decode_checkpoint(ckpt);
  SgdConfig sgd;
  sgd.learning_rate = r.get<float>();
  sgd.seed = r.get<std::uint64_t>();
  ctx.state.model = ModelReplica{std::move(c.spec), std::move(c.params), sgd};
  return {};
}

Bytes task_model_checksum(TaskContext& ctx, std::span<const std::byte>) {
  ByteWriter w;
  w.put(checksum(require_model(ctx.state).params));
  return w.take();
}

Bytes task_get_params(TaskContext& ctx, std::span<const std::byte>) {
  const ModelReplica& m = require_model(ctx.state);
  return encode_checkpoint(m.spec, m.params);
}

Bytes task_train_epoch(TaskContext& ctx, std::span<const std::byte> raw) {
  const TrainArgs a = decode_train_args(raw);
  ModelReplica& m = require_model(ctx.state);
  const RecordBatch& part = require_partition(ctx.state);
  const Tensor x = to_tensor(part, a.cols.features);
  if (x.cols() != m.spec.input_dim()) {
    throw DimensionError("model expects " + std::to_string(m.spec.input_dim()) +
                         " features, got " + std::to_string(x.cols()));
  }
  const Targets y = make_targets(m.spec, part, a.cols.labels);
  const std::size_t rows = part.num_rows();

  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (a.shuffle) shuffle_indices(order, a.seed, ctx.state.id, a.epoch);

  const KernelOptions kernel{std::max<std::size_t>(1, a.threads), 64};
  double loss_sum = 0.0;
  std::vector<std::uint64_t> sums;
  for (std::uint64_t s = 0; s < a.steps; ++s) {
    const std::size_t begin = static_cast<std::size_t>(s * a.batch);
    if (begin >= rows) throw DataError("step " + std::to_string(s) + " has no rows on this worker");
    const std::size_t end = std::min(rows, begin + static_cast<std::size_t>(a.batch));
    const std::span<const std::size_t> idx(order.data() + begin, end - begin);

    Gradients g = model_backward(m.spec, m.params, gather_rows(x, idx), gather_targets(y, idx), kernel);
    const std::vector<float> avg = ctx.comm.allreduce(flatten(g.grads), ReduceOp::Mean);
    unflatten(avg, g.grads);
    sgd_step(m.params, g.grads, m.sgd);
    loss_sum += g.loss;
    if (a.debug) sums.push_back(checksum(m.params));
  }

  ByteWriter w;
  w.put(a.steps == 0 ? 0.0 : loss_sum / static_cast<double>(a.steps));
  w.put(static_cast<std::uint64_t>(sums.size()));
  w.put_array(std::span<const std::uint64_t>(sums));
  return w.take();
}

Bytes task_predict_partition(TaskContext& ctx, std::span<const std::byte> raw) {
  ByteReader r(raw);
  ExecPlan plan;
  plan.precision = static_cast<Precision>(r.get<std::uint8_t>());
  plan.threads = r.get<std::uint32_t>();
  plan.block_size = r.get<std::uint32_t>();
  const auto features = get_strings(r);
  const ModelReplica& m = require_model(ctx.state);
  const RecordBatch& part = require_partition(ctx.state);

  InferenceModel model{m.spec, m.params, std::nullopt};
  const Tensor out = infer(model, to_tensor(part, features), plan);
  const auto names = prediction_columns(out.cols());
  std::vector<Column> cols;
  for (std::size_t j = 0; j < out.cols(); ++j) {
    std::vector<double> v(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) v[i] = out(i, j);
    cols.push_back({names[j], std::move(v)});
  }
  return encode_batch(RecordBatch(std::move(cols)));
}

Bytes task_evaluate_partition(TaskContext& ctx, std::span<const std::byte> raw) {
  ByteReader r(raw);
  const auto metric = static_cast<Metric>(r.get<std::uint8_t>());
  DataColumns cols;
  cols.features = get_strings(r);
  cols.labels = get_strings(r);
  const ModelReplica& m = require_model(ctx.state);
  const RecordBatch& part = require_partition(ctx.state);
  const Tensor x = to_tensor(part, cols.features);

  std::vector<double> values(part.num_rows());
  switch (metric) {
    case Metric::Loss: {
      const auto losses = row_losses(m.spec, m.params, x, make_targets(m.spec, part, cols.labels));
      std::copy(losses.begin(), losses.end(), values.begin());
      break;
    }
    case Metric::Accuracy: {
      if (cols.labels.size() != 1) throw DataError("accuracy needs exactly one label column");
      const ClassLabels y = to_labels(part, cols.labels.front());
      const Tensor out = model_forward(m.spec, m.params, x);
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = argmax_row(out.row(i)) == static_cast<std::size_t>(y[i]) ? 1.0 : 0.0;
      }
      break;
    }
    case Metric::MSE: {
      const Tensor out = model_forward(m.spec, m.params, x);
      Tensor target;
      if (cols.labels.size() == out.cols()) {
        target = to_tensor(part, cols.labels);
      } else if (cols.labels.size() == 1) {
        // Class labels against probabilities: compare with the one-hot target.
        const ClassLabels y = to_labels(part, cols.labels.front());
        target = Tensor(out.rows(), out.cols());
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (static_cast<std::size_t>(y[i]) >= out.cols()) throw DataError("label out of range");
          target(i, static_cast<std::size_t>(y[i])) = 1.0f;
        }
      } else {
        throw DataError("MSE needs one label column per output or a single class column");
      }
      for (std::size_t i = 0; i < values.size(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < out.cols(); ++j) {
          const double d = static_cast<double>(out(i, j)) - target(i, j);
          acc += d * d;
        }
        values[i] = acc / static_cast<double>(out.cols());
      }
      break;
    }
    default:
      throw ProtocolError("unknown metric code");
  }
  ByteWriter w;
  w.put(static_cast<std::uint64_t>(values.size()));
  w.put_array(std::span<const double>(values));
  return w.take();
}

}  // namespace

void register_estimator_tasks(TaskRegistry& registry) {
  registry.add("load_model", task_load_model);
  registry.add("model_checksum", task_model_checksum);
  registry.add("get_params", task_get_params);
  registry.add("train_epoch", task_train_epoch);
  registry.add("predict_partition", task_predict_partition);
  registry.add("evaluate_partition", task_evaluate_partition);
}

std::string to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    epochs.push_back({{"epoch", i},
                      {"mean_loss", r.epochs[i].mean_loss},
                      {"wall_seconds", r.epochs[i].wall_seconds},
                      {"steps", r.epochs[i].steps}});
  }
  nlohmann::json j{{"epochs", epochs}};
  if (!r.step_checksums.empty()) {
    j["checked_steps"] = r.step_checksums.size();
    j["checksum_mismatches"] = r.checksum_mismatches;
  }
  return j.dump();
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::Accuracy: return "accuracy";
    case Metric::MSE: return "mse";
    case Metric::Loss: return "loss";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  if (name == "accuracy") return Metric::Accuracy;
  if (name == "mse") return Metric::MSE;
  if (name == "loss") return Metric::Loss;
  throw Error("unknown metric '" + std::string(name) + "' (expected accuracy, mse or loss)");
}

std::vector<std::string> prediction_columns(std::size_t outputs) {
  if (outputs == 1) return {"prediction"};
  std::vector<std::string> out;
  for (std::size_t j = 0; j < outputs; ++j) out.push_back("prediction_" + std::to_string(j));
  return out;
}

struct Estimator::Impl {
  ModelSpec spec;
  SgdConfig sgd;
  ModelParams params;
  ClusterContext* cluster = nullptr;
  WorkerState local;
  LocalCommunicator comm;

  std::size_t replicas() const { return cluster ? cluster->size() : 1; }

  std::vector<Bytes> dispatch(const std::string& task, const Bytes& args) {
    if (cluster) return cluster->run_task(task, args);
    TaskContext ctx{local, comm};
    return {TaskRegistry::instance().run(task, ctx, args)};
  }

  void push_model() {
    Bytes payload = encode_model(spec, params, sgd);
    if (cluster) {
      cluster->broadcast(payload);
    } else {
      local.broadcast = std::move(payload);
    }
    dispatch("load_model", {});
  }

  void pull_params() {
    const auto res = dispatch("get_params", {});
    params = decode_checkpoint(res.front()).params;
  }

  void require_layout(const Shards& data) const {
    if (cluster && data.num_partitions() != cluster->size()) {
      throw DataError("data has " + std::to_string(data.num_partitions()) + " partitions but the cluster has " +
                      std::to_string(cluster->size()) + " workers; repartition first");
    }
  }

  // Runs `task` over every partition in order and returns each partition's
  // result. Local mode walks the partitions one at a time.
  std::vector<Bytes> per_partition(const Shards& data, const std::string& task, const Bytes& args) {
    require_layout(data);
    if (cluster) {
      cluster->scatter_shards(data);
      return cluster->run_task(task, args);
    }
    std::vector<Bytes> out;
    for (const auto& p : data.partitions()) {
      local.partition = p;
      out.push_back(dispatch(task, args).front());
    }
    local.partition.reset();
    return out;
  }
};

Estimator::Estimator(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Estimator::Estimator(Estimator&&) noexcept = default;
Estimator& Estimator::operator=(Estimator&&) noexcept = default;
Estimator::~Estimator() = default;

Estimator Estimator::from_model(const ModelSpec& spec, const SgdConfig& sgd, ClusterContext* cluster) {
  validate(spec);
  if (cluster && cluster->state() != ClusterState::Ready) {
    throw ClusterError("estimator needs a Ready cluster, got " + std::string(to_string(cluster->state())));
  }
  auto impl = std::make_unique<Impl>();
  impl->spec = spec;
  impl->sgd = sgd;
  impl->params = init_params(spec, sgd.seed);
  impl->cluster = cluster;
  impl->push_model();
  return Estimator(std::move(impl));
}

Estimator Estimator::load(const std::filesystem::path& path, const SgdConfig& sgd, ClusterContext* cluster) {
  Checkpoint c = load_checkpoint(path);
  Estimator est = from_model(c.spec, sgd, cluster);
  est.impl_->params = std::move(c.params);
  est.impl_->push_model();
  return est;
}

TrainReport Estimator::fit(const Shards& data, const DataColumns& cols, const FitConfig& cfg) {
  Impl& im = *impl_;
  if (cfg.epochs == 0) throw Error("epochs must be at least 1");
  if (cfg.batch_size == 0) throw Error("batch_size must be at least 1");
  require_columns(data.schema(), cols.features);
  require_columns(data.schema(), cols.labels);
  if (cols.features.size() != im.spec.input_dim()) {
    throw DimensionError("model expects " + std::to_string(im.spec.input_dim()) + " features, got " +
                         std::to_string(cols.features.size()) + " feature columns");
  }

  std::vector<std::size_t> sizes;
  if (im.cluster) {
    im.require_layout(data);
    sizes = data.partition_sizes();
  } else {
    sizes = {data.num_rows()};
  }
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) {
      throw DataError("partition " + std::to_string(i) + " is empty; repartition so every worker gets rows");
    }
  }
  std::size_t steps = SIZE_MAX;
  for (auto s : sizes) steps = std::min(steps, (s + cfg.batch_size - 1) / cfg.batch_size);

  if (im.cluster) {
    im.cluster->scatter_shards(data);
  } else {
    im.local.partition = collect(data);
  }

  TrainReport report;
  TrainArgs args;
  args.steps = steps;
  args.batch = cfg.batch_size;
  args.seed = cfg.seed;
  args.shuffle = cfg.shuffle;
  args.debug = cfg.debug_checksums;
  args.threads = static_cast<std::uint32_t>(cfg.threads);
  args.cols = cols;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    if (interrupt_requested()) throw Interrupted();
    args.epoch = e;
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = im.dispatch("train_epoch", encode(args));
    const auto t1 = std::chrono::steady_clock::now();

    double loss = 0.0;
    std::vector<std::vector<std::uint64_t>> per_worker;
    for (const auto& res : results) {
      ByteReader r(res);
      loss += r.get<double>();
      std::vector<std::uint64_t> sums(static_cast<std::size_t>(r.get<std::uint64_t>()));
      r.get_array(std::span<std::uint64_t>(sums));
      per_worker.push_back(std::move(sums));
    }
    report.epochs.push_back({loss / static_cast<double>(results.size()),
                             std::chrono::duration<double>(t1 - t0).count(), steps});
    if (cfg.debug_checksums) {
      for (std::size_t s = 0; s < steps; ++s) {
        std::vector<std::uint64_t> row;
        for (const auto& w : per_worker) row.push_back(w.at(s));
        if (std::adjacent_find(row.begin(), row.end(), std::not_equal_to<>()) != row.end()) {
          ++report.checksum_mismatches;
        }
        report.step_checksums.push_back(std::move(row));
      }
    }
  }
  if (!im.cluster) im.local.partition.reset();
  im.pull_params();
  return report;
}

Shards Estimator::predict(const Shards& data, const std::vector<std::string>& features,
                          const ExecPlan& plan) {
  Impl& im = *impl_;
  require_columns(data.schema(), features);
  if (features.size() != im.spec.input_dim()) {
    throw DimensionError("model expects " + std::to_string(im.spec.input_dim()) + " features, got " +
                         std::to_string(features.size()));
  }
  const auto names = prediction_columns(im.spec.output_dim());
  std::vector<RecordBatch> parts;
  if (data.num_rows() == 0) {
    for (const auto& p : data.partitions()) {
      RecordBatch b = p;
      for (const auto& n : names) b.set_column({n, std::vector<double>{}});
      parts.push_back(std::move(b));
    }
  } else {
    const auto results = im.per_partition(data, "predict_partition", encode_predict_args(features, plan));
    for (std::size_t i = 0; i < results.size(); ++i) {
      RecordBatch b = data.partition(i);
      RecordBatch preds = decode_batch(results[i]);
      for (const auto& c : preds.columns()) b.set_column(c);
      parts.push_back(std::move(b));
    }
  }
  Schema schema = data.schema();
  for (const auto& n : names) {
    std::erase_if(schema, [&](const ColumnSpec& c) { return c.name == n; });
    schema.push_back({n, ColumnKind::Float});
  }
  return Shards(std::move(schema), std::move(parts));
}

double Estimator::evaluate(const Shards& data, const DataColumns& cols, Metric metric) {
  Impl& im = *impl_;
  require_columns(data.schema(), cols.features);
  require_columns(data.schema(), cols.labels);
  if (data.num_rows() == 0) throw DataError("cannot evaluate on zero rows");
  const auto results = im.per_partition(data, "evaluate_partition", encode_eval_args(cols, metric));
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& res : results) {
    ByteReader r(res);
    std::vector<double> v(static_cast<std::size_t>(r.get<std::uint64_t>()));
    r.get_array(std::span<double>(v));
    for (double x : v) total += x;
    rows += v.size();
  }
  return total / static_cast<double>(rows);
}

void Estimator::save(const std::filesystem::path& path) const {
  save_checkpoint(path, impl_->spec, impl_->params);
}

const ModelSpec& Estimator::spec() const noexcept { return impl_->spec; }
const ModelParams& Estimator::params() const noexcept { return impl_->params; }
const SgdConfig& Estimator::sgd() const noexcept { return impl_->sgd; }
bool Estimator::distributed() const noexcept { return impl_->cluster != nullptr; }

std::vector<std::uint64_t> Estimator::replica_checksums() {
  std::vector<std::uint64_t> out;
  for (const auto& r : impl_->dispatch("model_checksum", {})) {
    ByteReader rd(r);
    out.push_back(rd.get<std::uint64_t>());
  }
  return out;
}

}  // namespace shardpipe
