#pragma once

// Little-endian primitives shared by the EMBF, SPRJ and LCLF containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "protomix/errors.hpp"

namespace protomix::detail {

class ByteWriter {
 public:
  void raw(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  template <typename UInt>
  void uint(UInt value) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      buf_.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
    }
  }

  void f32(float value) { uint(std::bit_cast<std::uint32_t>(value)); }
  void f64(double value) { uint(std::bit_cast<std::uint64_t>(value)); }

  const std::vector<char>& bytes() const { return buf_; }

  void write_to(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
  }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> data, std::string context)
      : data_(std::move(data)), context_(std::move(context)) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::vector<char>& data() const { return data_; }

  void require(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw TruncationError(fmt::format("{}: truncated {} (need {} bytes, have {})",
                                        context_, what, n, remaining()));
    }
  }

  std::string_view raw(std::size_t n, std::string_view what) {
    require(n, what);
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename UInt>
  UInt uint(std::string_view what) {
    require(sizeof(UInt), what);
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      value |= static_cast<UInt>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(UInt);
    return value;
  }

  float f32(std::string_view what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  double f64(std::string_view what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }

  std::string rest() {
    std::string out(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.end());
    pos_ = data_.size();
    return out;
  }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace protomix::detail
