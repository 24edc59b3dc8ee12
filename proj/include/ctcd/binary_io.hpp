// SPDX-License-Identifier: Apache-2.0
// Little-endian primitives for the checkpoint and corpus cache formats.
#ifndef CTCD_BINARY_IO_HPP
#define CTCD_BINARY_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace ctcd::io {

template <typename T>
T toLittle(T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
  }
  return value;
}

template <typename T>
void write(std::ostream &os, T value) {
  value = toLittle(value);
  os.write(reinterpret_cast<const char *>(&value), sizeof(T));
}

template <typename T>
T read(std::istream &is) {
  T value;
  if (!is.read(reinterpret_cast<char *>(&value), sizeof(T))) throw std::runtime_error("unexpected end of file");
  return toLittle(value);
}

inline void writeString(std::ostream &os, const std::string &s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string readString(std::istream &is, std::uint32_t max_len = 1u << 24) {
  const auto n = read<std::uint32_t>(is);
  if (n > max_len) throw std::runtime_error("string field too long");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error("unexpected end of file");
  return s;
}

}  // namespace ctcd::io

#endif  // CTCD_BINARY_IO_HPP
