// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmt/error.hpp"

namespace cmt {

using Bytes = std::vector<std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "byte writers assume a little-endian host");

/// Appends little-endian scalars to a growing buffer.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void magic(std::string_view m) { raw(m.data(), m.size()); }

  /// u16 length + UTF-8 bytes.
  void str16(std::string_view s) {
    if (s.size() > 0xffff) throw InputError("string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  Bytes& out_;
};

/// Bounds-checked little-endian reader. Every overrun throws FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }
  void seek(std::size_t pos) {
    if (pos > in_.size()) throw FormatError("seek past end of buffer");
    pos_ = pos;
  }

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view m, const char* what) {
    auto s = take(m.size());
    if (std::memcmp(s.data(), m.data(), m.size()) != 0)
      throw FormatError(std::string("bad magic for ") + what);
  }

  std::string str16() {
    const auto n = u16();
    auto s = take(n);
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining())
      throw FormatError("truncated input: need " + std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()));
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace cmt
