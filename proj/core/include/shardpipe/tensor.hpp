#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace shardpipe {

// Dense row-major 2-D float32 matrix.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Tensor(std::size_t rows, std::size_t cols, std::vector<float> data);

  // Nested-list construction for tests and small literals: {{1, 2}, {3, 4}}.
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  // Rows [begin, end) copied into a new tensor.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

struct KernelOptions {
  std::size_t threads = 1;
  std::size_t block_size = 64;
};

// a (m×k) · b (k×n). Each output element accumulates its k products in
// ascending k order starting from 0.0f, independent of threads and blocking,
// so results are bit-identical to the textbook triple loop.
Tensor matmul(const Tensor& a, const Tensor& b, const KernelOptions& opts = {});

// Adds `bias` (1×n) to every row of `m` in place.
void add_row_bias(Tensor& m, const Tensor& bias);

// Largest absolute element, 0 for an empty tensor.
float max_abs(const Tensor& t);

}  // namespace shardpipe
