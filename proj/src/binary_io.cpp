#include "etl/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace etl::io {

void Writer::str16(std::string_view s) {
  if (s.size() > UINT16_MAX) throw FormatError("string too long for u16 length prefix");
  u16(static_cast<std::uint16_t>(s.size()));
  bytes(s.data(), s.size());
}

void Writer::str32(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void Writer::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Reader Reader::open(const std::filesystem::path& path, std::string what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + what + " file " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return Reader(std::move(data), std::move(what));
}

void Reader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) {
    throw FormatError(what_ + ": truncated file (needed " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ")");
  }
}

void Reader::expect_magic(std::string_view m) {
  need(m.size());
  std::string got(reinterpret_cast<const char*>(data_.data() + pos_), m.size());
  if (got != m) {
    throw FormatError(what_ + ": bad magic, expected \"" + std::string(m) + "\"");
  }
  pos_ += m.size();
}

void Reader::bytes(void* out, std::size_t n) {
  need(n);
  std::memcpy(out, data_.data() + pos_, n);
  pos_ += n;
}

std::string Reader::str16() {
  std::string s(u16(), '\0');
  bytes(s.data(), s.size());
  return s;
}

std::string Reader::str32() {
  std::string s(u32(), '\0');
  bytes(s.data(), s.size());
  return s;
}

void Reader::expect_end() const {
  if (pos_ != data_.size()) {
    throw FormatError(what_ + ": " + std::to_string(data_.size() - pos_) + " trailing bytes");
  }
}

}  // namespace etl::io
