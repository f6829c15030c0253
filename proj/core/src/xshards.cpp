#include "shardpipe/xshards.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "shardpipe/errors.hpp"
#include "shardpipe/thread_pool.hpp"

namespace shardpipe {

std::string_view to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::Float: return "float";
    case ColumnKind::Int: return "int";
    case ColumnKind::String: return "string";
  }
  return "?";
}

std::size_t Column::size() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

RecordBatch::RecordBatch(std::vector<Column> columns) {
  for (auto& c : columns) set_column(std::move(c));
}

RecordBatch RecordBatch::empty(const Schema& schema) {
  RecordBatch b;
  for (const auto& spec : schema) {
    Column c{spec.name, {}};
    switch (spec.kind) {
      case ColumnKind::Float: c.data = std::vector<double>{}; break;
      case ColumnKind::Int: c.data = std::vector<std::int64_t>{}; break;
      case ColumnKind::String: c.data = std::vector<std::string>{}; break;
    }
    b.columns_.push_back(std::move(c));
  }
  return b;
}

Schema RecordBatch::schema() const {
  Schema s;
  s.reserve(columns_.size());
  for (const auto& c : columns_) s.push_back({c.name, c.kind()});
  return s;
}

bool RecordBatch::has_column(std::string_view name) const noexcept {
  return std::any_of(columns_.begin(), columns_.end(), [&](const Column& c) { return c.name == name; });
}

const Column& RecordBatch::column(std::string_view name) const {
  for (const auto& c : columns_) {
    if (c.name == name) return c;
  }
  throw DataError("no column named '" + std::string(name) + "'");
}

Column& RecordBatch::column(std::string_view name) {
  return const_cast<Column&>(std::as_const(*this).column(name));
}

void RecordBatch::set_column(Column c) {
  const std::size_t n = c.size();
  if (!columns_.empty() && n != rows_) {
    throw DataError("column '" + c.name + "' has " + std::to_string(n) + " rows, batch has " +
                    std::to_string(rows_));
  }
  rows_ = n;
  for (auto& existing : columns_) {
    if (existing.name == c.name) {
      existing = std::move(c);
      return;
    }
  }
  columns_.push_back(std::move(c));
}

RecordBatch RecordBatch::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) {
    throw DataError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                    ") out of range for " + std::to_string(rows_) + " rows");
  }
  RecordBatch out;
  for (const auto& c : columns_) {
    Column part{c.name, {}};
    std::visit(
        [&](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          part.data = V(v.begin() + static_cast<std::ptrdiff_t>(begin),
                        v.begin() + static_cast<std::ptrdiff_t>(end));
        },
        c.data);
    out.columns_.push_back(std::move(part));
  }
  out.rows_ = end - begin;
  return out;
}

void RecordBatch::append(const RecordBatch& other) {
  if (columns_.empty() && rows_ == 0) {
    *this = other;
    return;
  }
  if (schema() != other.schema()) throw DataError("cannot append batches with different schemas");
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    std::visit(
        [&](auto& dst) {
          using V = std::decay_t<decltype(dst)>;
          const auto& src = std::get<V>(other.columns_[i].data);
          dst.insert(dst.end(), src.begin(), src.end());
        },
        columns_[i].data);
  }
  rows_ += other.rows_;
}

Shards::Shards(Schema schema, std::vector<RecordBatch> partitions)
    : schema_(std::move(schema)), parts_(std::move(partitions)), assigned_(parts_.size()) {
  if (parts_.empty()) throw DataError("shards need at least one partition");
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    if (parts_[i].schema() != schema_) {
      throw DataError("partition " + std::to_string(i) + " does not match the shard schema");
    }
  }
}

std::vector<PartitionMeta> Shards::metadata() const {
  std::vector<PartitionMeta> m;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    m.push_back({i, parts_[i].num_rows(), assigned_[i]});
  }
  return m;
}

std::vector<std::size_t> Shards::partition_sizes() const {
  std::vector<std::size_t> sizes;
  for (const auto& p : parts_) sizes.push_back(p.num_rows());
  return sizes;
}

std::size_t Shards::num_rows() const noexcept {
  std::size_t n = 0;
  for (const auto& p : parts_) n += p.num_rows();
  return n;
}

Shards Shards::with_assignment(std::span<const int> workers) const {
  if (workers.size() != parts_.size()) {
    throw DataError("assignment covers " + std::to_string(workers.size()) + " of " +
                    std::to_string(parts_.size()) + " partitions");
  }
  Shards out = *this;
  for (std::size_t i = 0; i < workers.size(); ++i) out.assigned_[i] = workers[i];
  return out;
}

Shards shards_from_rows(const RecordBatch& rows, std::size_t n_parts) {
  if (n_parts == 0) throw DataError("partition count must be at least 1");
  std::vector<RecordBatch> parts;
  parts.reserve(n_parts);
  for (std::size_t i = 0; i < n_parts; ++i) {
    const Range r = balanced_range(rows.num_rows(), n_parts, i);
    parts.push_back(rows.slice(r.begin, r.end));
  }
  return Shards(rows.schema(), std::move(parts));
}

RecordBatch collect(const Shards& s) {
  RecordBatch out = RecordBatch::empty(s.schema());
  for (const auto& p : s.partitions()) out.append(p);
  return out;
}

Shards repartition(const Shards& s, std::size_t n_parts) {
  return shards_from_rows(collect(s), n_parts);
}

Shards transform_shard(const Shards& s, const PartitionFn& fn, TransformOptions opts) {
  const std::size_t n = s.num_partitions();
  std::vector<RecordBatch> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto apply = [&](std::size_t i) {
    try {
      out[i] = fn(s.partition(i));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) apply(i);
  } else {
    shared_pool(threads).run(threads, [&](std::size_t part) {
      const Range r = balanced_range(n, threads, part);
      for (std::size_t i = r.begin; i < r.end; ++i) apply(i);
    });
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    std::string what = "unknown error";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    throw DataError("transform failed on partition " + std::to_string(i) + ": " + what);
  }
  Schema schema = out.front().schema();
  for (std::size_t i = 1; i < n; ++i) {
    if (out[i].schema() != schema) {
      throw DataError("transform produced a different schema on partition " + std::to_string(i));
    }
  }
  return Shards(std::move(schema), std::move(out));
}

namespace {

const Column& numeric_column(const RecordBatch& batch, std::string_view name) {
  const Column& c = batch.column(name);
  if (c.kind() == ColumnKind::String) {
    throw DataError("column '" + std::string(name) + "' is not numeric");
  }
  return c;
}

double numeric_at(const Column& c, std::size_t row) {
  if (const auto* f = std::get_if<std::vector<double>>(&c.data)) return (*f)[row];
  return static_cast<double>(std::get<std::vector<std::int64_t>>(c.data)[row]);
}

}  // namespace

Tensor to_tensor(const RecordBatch& batch, std::span<const std::string> columns) {
  Tensor t(batch.num_rows(), columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const Column& c = numeric_column(batch, columns[j]);
    for (std::size_t i = 0; i < batch.num_rows(); ++i) {
      t(i, j) = static_cast<float>(numeric_at(c, i));
    }
  }
  return t;
}

ClassLabels to_labels(const RecordBatch& batch, std::string_view column) {
  const Column& c = numeric_column(batch, column);
  ClassLabels labels(batch.num_rows());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = numeric_at(c, i);
    if (v != std::floor(v) || v < 0.0 || v > 2147483647.0) {
      throw DataError("label column '" + std::string(column) + "' row " + std::to_string(i) +
                      " is not a class index");
    }
    labels[i] = static_cast<std::int32_t>(v);
  }
  return labels;
}

void require_columns(const Schema& schema, std::span<const std::string> names) {
  for (const auto& n : names) {
    const bool found = std::any_of(schema.begin(), schema.end(),
                                   [&](const ColumnSpec& c) { return c.name == n; });
    if (!found) throw DataError("missing column '" + n + "'");
  }
}

Bytes encode_batch(const RecordBatch& batch) {
  ByteWriter w;
  w.put(static_cast<std::uint32_t>(batch.num_columns()));
  w.put(static_cast<std::uint64_t>(batch.num_rows()));
  for (const auto& c : batch.columns()) {
    w.put_string(c.name);
    w.put(static_cast<std::uint8_t>(c.kind()));
    std::visit(
        [&](const auto& v) {
          using T = typename std::decay_t<decltype(v)>::value_type;
          if constexpr (std::is_same_v<T, std::string>) {
            for (const auto& s : v) w.put_string(s);
          } else {
            w.put_array(std::span<const T>(v));
          }
        },
        c.data);
  }
  return w.take();
}

RecordBatch decode_batch(std::span<const std::byte> bytes) {
  ByteReader<ProtocolError> r(bytes);
  const auto n_cols = r.get<std::uint32_t>();
  const auto n_rows = static_cast<std::size_t>(r.get<std::uint64_t>());
  if (n_cols > 0 && n_rows > r.remaining()) throw ProtocolError("record batch row count exceeds payload");
  std::vector<Column> cols;
  Schema schema;
  for (std::uint32_t i = 0; i < n_cols; ++i) {
    Column c{r.get_string(), {}};
    const auto kind = r.get<std::uint8_t>();
    switch (kind) {
      case 0: {
        std::vector<double> v(n_rows);
        r.get_array(std::span<double>(v));
        c.data = std::move(v);
        break;
      }
      case 1: {
        std::vector<std::int64_t> v(n_rows);
        r.get_array(std::span<std::int64_t>(v));
        c.data = std::move(v);
        break;
      }
      case 2: {
        std::vector<std::string> v;
        v.reserve(n_rows);
        for (std::size_t k = 0; k < n_rows; ++k) v.push_back(r.get_string());
        c.data = std::move(v);
        break;
      }
      default: throw ProtocolError("unknown column kind " + std::to_string(kind));
    }
    schema.push_back({c.name, c.kind()});
    cols.push_back(std::move(c));
  }
  if (!r.done()) throw ProtocolError("trailing bytes after record batch");
  if (cols.empty()) return RecordBatch();
  return RecordBatch(std::move(cols));
}

}  // namespace shardpipe
