#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpsr/common.hpp"

namespace dpsr::io {

static_assert(std::endian::native == std::endian::little,
              "artifact files are little-endian; big-endian hosts need byte swapping");

// Append-only little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.append(p, sizeof(T));
  }

  template <typename T>
  void put_span(std::span<const T> values) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes_.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  }

  void put_bytes(std::string_view s) { bytes_.append(s); }

  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }

  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

// Bounds-checked cursor over a fully loaded file. Every read past the end is a
// kCorrupt failure, so a truncated artifact never yields a partial object.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  template <typename T>
  void get_into(std::span<T> out) {
    auto raw = take(out.size_bytes());
    std::memcpy(out.data(), raw.data(), raw.size());
  }

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      fail(ErrorKind::kCorrupt, what_ + ": truncated at byte " + std::to_string(pos_));
    }
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string() {
    auto n = get<std::uint32_t>();
    return std::string(take(n));
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (!at_end()) {
      fail(ErrorKind::kCorrupt,
           what_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

// Writes to a sibling temporary and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kNotFound, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::kNotFound, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dpsr::io
