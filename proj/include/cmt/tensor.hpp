// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmt/bytes.hpp"
#include "cmt/error.hpp"

namespace cmt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of doubles. Plain value type.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  /// 2-D literal: Tensor::matrix({{1,2},{3,4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(d));
  }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of a 2-D view. 1-D tensors read as a single row.
  std::size_t rows() const { return ndim() == 1 ? 1 : shape_.at(0); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_shape() const {
    for (auto d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// --- CMTT binary format --------------------------------------------------
// "CMTT" | u8 ndim | ndim x u32 dims | prod(dims) x f64, all little-endian.

inline void write_cmtt(ByteWriter& w, const Tensor& t) {
  if (t.ndim() == 0 || t.ndim() > 255) throw DimensionError("CMTT needs 1..255 dimensions");
  w.magic("CMTT");
  w.u8(static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) {
    if (d > 0xffffffffULL) throw DimensionError("CMTT dimension exceeds u32");
    w.u32(static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) w.f64(v);
}

inline Bytes encode_cmtt(const Tensor& t) {
  Bytes out;
  ByteWriter w(out);
  write_cmtt(w, t);
  return out;
}

/// Reads one CMTT tensor. The element count is validated against the bytes
/// actually available before anything is allocated.
inline Tensor read_cmtt(ByteReader& r) {
  r.expect_magic("CMTT", "tensor");
  const auto ndim = r.u8();
  if (ndim == 0) throw FormatError("CMTT tensor with zero dimensions");
  Shape shape(ndim);
  std::size_t numel = 1;
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw FormatError("CMTT tensor with zero-length dimension");
    if (numel > r.remaining() / d) throw FormatError("CMTT tensor larger than its buffer");
    numel *= d;
  }
  if (numel > r.remaining() / sizeof(double)) throw FormatError("truncated CMTT payload");
  std::vector<double> data(numel);
  for (auto& v : data) v = r.f64();
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor decode_cmtt(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Tensor t = read_cmtt(r);
  if (r.remaining() != 0) throw FormatError("trailing bytes after CMTT tensor");
  return t;
}

inline Bytes read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const Bytes& b) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw InputError("short write to " + path);
}

inline void save_tensor(const std::string& path, const Tensor& t) { write_file_bytes(path, encode_cmtt(t)); }
inline Tensor load_tensor(const std::string& path) { return decode_cmtt(read_file_bytes(path)); }

}  // namespace cmt
