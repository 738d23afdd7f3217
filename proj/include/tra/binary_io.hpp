#pragma once

#include "tra/core.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace tra {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and written by memcpy");

// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void i64(std::int64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }

  const std::vector<unsigned char>& data() const { return buf_; }

  void write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + path);
  }

 private:
  std::vector<unsigned char> buf_;
};

// Bounds-checked reader; running off the end is reported as a corrupt file.
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> buf, std::string what = "buffer")
      : buf_(std::move(buf)), what_(std::move(what)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open for reading: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(buf), path);
  }

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size())
      throw Error(ErrorKind::CorruptFile,
                  what_ + ": truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) + " more)");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool has_magic(std::string_view m) {
    if (buf_.size() < m.size()) return false;
    if (std::memcmp(buf_.data(), m.data(), m.size()) != 0) return false;
    pos_ = m.size();
    return true;
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  std::int64_t i64() { std::int64_t v; bytes(&v, 8); return v; }
  float f32() { float v; bytes(&v, 4); return v; }
  double f64() { double v; bytes(&v, 8); return v; }

  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  std::vector<unsigned char> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace tra
