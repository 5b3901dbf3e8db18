#pragma once

// Little-endian byte encoding, CRC32 and whole-file I/O shared by the
// feature container and the checkpoint format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cainn/error.hpp"

namespace cainn::detail {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

class ByteWriter {
 public:
  template <typename V>
  void put(V value) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }

  void put_bytes(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  template <typename V>
  void put_array(std::span<const V> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  // Appends the CRC32 of everything written so far.
  void put_crc() { put(crc32(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  template <typename V>
  V get() {
    V value;
    std::memcpy(&value, take(sizeof(V)).data(), sizeof(V));
    return value;
  }

  std::string get_string() {
    const auto len = get<std::uint32_t>();
    const auto raw = take(len);
    return std::string(raw.begin(), raw.end());
  }

  template <typename V>
  void get_array(std::span<V> out) {
    std::memcpy(out.data(), take(out.size_bytes()).data(), out.size_bytes());
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw TruncatedFileError(context_ + ": file is truncated");
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

// Throws ChecksumMismatchError unless the last four bytes are the CRC32 of
// the rest.
void verify_trailing_crc(std::span<const std::uint8_t> bytes, const std::string& context);

}  // namespace cainn::detail
