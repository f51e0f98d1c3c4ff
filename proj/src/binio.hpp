#pragma once

// Little-endian primitive IO shared by the corpus cache and checkpoints.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "stpoi/errors.hpp"

namespace stpoi::binio {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

inline void write_u8(std::ostream& out, std::uint8_t v) {
  out.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_f64s(std::ostream& out, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) write_f64(out, data[i]);
}

inline void require(std::istream& in, const char* what) {
  if (!in) throw FormatError(std::string("truncated file while reading ") + what);
}

inline std::uint8_t read_u8(std::istream& in, const char* what) {
  const int c = in.get();
  require(in, what);
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(in, what);
  return to_little(v);
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(in, what);
  return to_little(v);
}

inline double read_f64(std::istream& in, const char* what) {
  return std::bit_cast<double>(read_u64(in, what));
}

inline std::string read_string(std::istream& in, const char* what) {
  const std::uint32_t n = read_u32(in, what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  require(in, what);
  return s;
}

inline void read_f64s(std::istream& in, double* data, std::size_t n, const char* what) {
  for (std::size_t i = 0; i < n; ++i) data[i] = read_f64(in, what);
}

inline void write_magic(std::ostream& out, const char (&magic)[9]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[9], const char* what) {
  char buf[8] = {};
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) {
    throw FormatError(std::string("not a ") + what + " file (bad magic)");
  }
}

}  // namespace stpoi::binio
