#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factorix/error.hpp"

// Little-endian primitives shared by the PKDS / NTCK / ATTN / HIDN formats.
namespace factorix::binio {

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return value;
}

template <typename T>
void write(std::ostream& out, T value) {
  value = to_little(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read(std::istream& in, std::string_view what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  require(in.gcount() == static_cast<std::streamsize>(sizeof(T)), "truncated file while reading " + std::string(what));
  return to_little(value);
}

template <typename T>
void write_array(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) write(out, v);
  }
}

template <typename T>
void read_array(std::istream& in, std::span<T> values, std::string_view what) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  require(in.gcount() == static_cast<std::streamsize>(values.size_bytes()),
          "truncated file while reading " + std::string(what));
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) v = to_little(v);
  }
}

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), 4); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  char buf[4] = {};
  in.read(buf, 4);
  require(in.gcount() == 4 && std::string_view(buf, 4) == magic, "bad magic: expected " + std::string(magic));
}

// True when another record starts at the current position.
inline bool more(std::istream& in) { return in.peek() != std::char_traits<char>::eof(); }

}  // namespace factorix::binio
