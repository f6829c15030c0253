#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "shardpipe/errors.hpp"

namespace shardpipe {

static_assert(std::endian::native == std::endian::little,
              "wire and file formats are written with native little-endian stores");

using Bytes = std::vector<std::byte>;

// Append-only little-endian encoder.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto off = buf_.size();
    buf_.resize(off + sizeof(T));
    std::memcpy(buf_.data() + off, &v, sizeof(T));
  }

  void put_bytes(std::span<const std::byte> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  void put_raw(std::string_view s) {
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    buf_.insert(buf_.end(), p, p + s.size());
  }

  // u32 length prefix then bytes.
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s);
  }

  void put_blob(std::span<const std::byte> b) {
    put(static_cast<std::uint64_t>(b.size()));
    put_bytes(b);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    const auto off = buf_.size();
    buf_.resize(off + values.size_bytes());
    if (!values.empty()) std::memcpy(buf_.data() + off, values.data(), values.size_bytes());
  }

  Bytes& bytes() noexcept { return buf_; }
  Bytes take() noexcept { return std::move(buf_); }

 private:
  Bytes buf_;
};

// Bounds-checked decoder. Every read past the end throws the error type the
// caller chose, so truncated input never yields partial values.
template <typename Err = ProtocolError>
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::byte> get_bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    auto s = get_bytes(n);
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }

  Bytes get_blob() {
    const auto n = get<std::uint64_t>();
    auto s = get_bytes(static_cast<std::size_t>(n));
    return Bytes(s.begin(), s.end());
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out) {
    auto s = get_bytes(out.size_bytes());
    if (!out.empty()) std::memcpy(out.data(), s.data(), s.size());
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) {
      throw Err("truncated input: need " + std::to_string(n) + " bytes at offset " +
                std::to_string(pos_) + ", have " + std::to_string(data_.size() - pos_));
    }
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::span<const std::byte> data) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::byte b : data) {
    h ^= static_cast<std::uint8_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace shardpipe
