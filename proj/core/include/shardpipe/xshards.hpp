#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "shardpipe/bytes.hpp"
#include "shardpipe/nn.hpp"
#include "shardpipe/tensor.hpp"

namespace shardpipe {

enum class ColumnKind : std::uint8_t { Float = 0, Int = 1, String = 2 };
std::string_view to_string(ColumnKind k);

using ColumnData =
    std::variant<std::vector<double>, std::vector<std::int64_t>, std::vector<std::string>>;

struct Column {
  std::string name;
  ColumnData data;

  ColumnKind kind() const noexcept { return static_cast<ColumnKind>(data.index()); }
  std::size_t size() const noexcept;

  friend bool operator==(const Column&, const Column&) = default;
};

struct ColumnSpec {
  std::string name;
  ColumnKind kind;

  friend bool operator==(const ColumnSpec&, const ColumnSpec&) = default;
};
using Schema = std::vector<ColumnSpec>;

// Named columns of equal length.
class RecordBatch {
 public:
  RecordBatch() = default;
  explicit RecordBatch(std::vector<Column> columns);
  // Zero-row batch carrying `schema`.
  static RecordBatch empty(const Schema& schema);

  std::size_t num_rows() const noexcept { return rows_; }
  std::size_t num_columns() const noexcept { return columns_.size(); }
  Schema schema() const;

  bool has_column(std::string_view name) const noexcept;
  const Column& column(std::string_view name) const;
  Column& column(std::string_view name);
  const std::vector<Column>& columns() const noexcept { return columns_; }

  // Adds or replaces a column; its length must match num_rows() unless the
  // batch has no columns yet.
  void set_column(Column c);

  RecordBatch slice(std::size_t begin, std::size_t end) const;
  // Appends rows of `other`, which must have an identical schema.
  void append(const RecordBatch& other);

  friend bool operator==(const RecordBatch&, const RecordBatch&) = default;

 private:
  std::vector<Column> columns_;
  std::size_t rows_ = 0;
};

struct PartitionMeta {
  std::size_t index = 0;
  std::size_t row_count = 0;
  std::optional<int> worker;

  friend bool operator==(const PartitionMeta&, const PartitionMeta&) = default;
};

// Immutable partitioned record collection. Global row order is the
// concatenation of partitions in index order.
class Shards {
 public:
  Shards(Schema schema, std::vector<RecordBatch> partitions);

  std::size_t num_partitions() const noexcept { return parts_.size(); }
  const Schema& schema() const noexcept { return schema_; }
  const RecordBatch& partition(std::size_t i) const { return parts_.at(i); }
  const std::vector<RecordBatch>& partitions() const noexcept { return parts_; }
  std::vector<PartitionMeta> metadata() const;
  std::vector<std::size_t> partition_sizes() const;
  std::size_t num_rows() const noexcept;

  // Records which worker holds each partition (set by scatter).
  Shards with_assignment(std::span<const int> workers) const;

 private:
  Schema schema_;
  std::vector<RecordBatch> parts_;
  std::vector<std::optional<int>> assigned_;
};

// Contiguous balanced split: the first (rows mod n) partitions get one extra
// row. Partitions may be empty when n exceeds the row count.
Shards shards_from_rows(const RecordBatch& rows, std::size_t n_parts);

RecordBatch collect(const Shards& s);
inline std::size_t num_partitions(const Shards& s) { return s.num_partitions(); }

Shards repartition(const Shards& s, std::size_t n_parts);

using PartitionFn = std::function<RecordBatch(RecordBatch)>;

struct TransformOptions {
  std::size_t threads = 1;
};

// Applies `fn` to each partition independently; output keeps partition count
// and order. A throwing fn fails the whole call with a DataError naming the
// partition index. All outputs must share one schema.
Shards transform_shard(const Shards& s, const PartitionFn& fn, TransformOptions opts = {});

// Extra arguments are forwarded to every call: transform_shard(s, negate, "value").
template <typename F, typename... Args>
  requires(sizeof...(Args) > 0) && std::is_invocable_r_v<RecordBatch, F&, RecordBatch, Args&...>
Shards transform_shard(const Shards& s, F&& fn, Args&&... args) {
  return transform_shard(s, PartitionFn([&](RecordBatch b) { return fn(std::move(b), args...); }));
}

// Rows × cols float32 matrix built from the named numeric columns.
Tensor to_tensor(const RecordBatch& batch, std::span<const std::string> columns);
// Integer class labels from a numeric column; non-integral values are an error.
ClassLabels to_labels(const RecordBatch& batch, std::string_view column);

// Throws DataError listing the first missing column.
void require_columns(const Schema& schema, std::span<const std::string> names);

Bytes encode_batch(const RecordBatch& batch);
RecordBatch decode_batch(std::span<const std::byte> bytes);

}  // namespace shardpipe
