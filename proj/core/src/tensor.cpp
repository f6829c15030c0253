#include "shardpipe/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "shardpipe/errors.hpp"
#include "shardpipe/thread_pool.hpp"

namespace shardpipe {

Tensor::Tensor(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged tensor literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string());
  }
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                         data_.begin() + static_cast<std::ptrdiff_t>(end * cols_));
  return Tensor(end - begin, cols_, std::move(out));
}

std::string Tensor::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

namespace {

// Rows [r0, r1) of c = a·b. Loops are i, kk-block, jj-block, k, j: every
// c(i, j) still sees its k terms in increasing order.
void matmul_rows(const Tensor& a, const Tensor& b, Tensor& c, std::size_t r0, std::size_t r1,
                 std::size_t block) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  const float* bp = b.data().data();
  for (std::size_t i = r0; i < r1; ++i) {
    const float* ap = a.data().data() + i * k_dim;
    float* cp = c.data().data() + i * n;
    for (std::size_t kk = 0; kk < k_dim; kk += block) {
      const std::size_t k_end = std::min(kk + block, k_dim);
      for (std::size_t jj = 0; jj < n; jj += block * 4) {
        const std::size_t j_end = std::min(jj + block * 4, n);
        for (std::size_t k = kk; k < k_end; ++k) {
          const float av = ap[k];
          const float* brow = bp + k * n;
          for (std::size_t j = jj; j < j_end; ++j) cp[j] += av * brow[j];
        }
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, const KernelOptions& opts) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + a.shape_string() + " x " +
                         b.shape_string());
  }
  Tensor c(a.rows(), b.cols());
  if (c.empty() || a.cols() == 0) return c;

  const std::size_t block = std::max<std::size_t>(opts.block_size, 1);
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, a.rows());
  if (threads == 1) {
    matmul_rows(a, b, c, 0, a.rows(), block);
    return c;
  }
  shared_pool(threads).run(threads, [&](std::size_t part) {
    const Range r = balanced_range(a.rows(), threads, part);
    matmul_rows(a, b, c, r.begin, r.end, block);
  });
  return c;
}

void add_row_bias(Tensor& m, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != m.cols()) {
    throw DimensionError("bias shape " + bias.shape_string() + " does not match " +
                         m.shape_string());
  }
  const auto b = bias.row(0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
}

float max_abs(const Tensor& t) {
  float m = 0.0f;
  for (float v : t.data()) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace shardpipe
