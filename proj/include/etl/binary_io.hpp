#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "etl/errors.hpp"

// Little-endian byte buffers for the ETL* file formats.
namespace etl::io {

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str16(std::string_view s);
  void str32(std::string_view s);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> data, std::string what)
      : data_(std::move(data)), what_(std::move(what)) {}
  static Reader open(const std::filesystem::path& path, std::string what);

  void expect_magic(std::string_view m);
  std::uint8_t u8() { return static_cast<std::uint8_t>(le<std::uint8_t>()); }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  void bytes(void* out, std::size_t n);
  std::string str16();
  std::string str32();

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v = static_cast<T>(v | (static_cast<T>(data_[pos_ + i]) << (8 * i)));
    }
    pos_ += sizeof(T);
    return v;
  }

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace etl::io
