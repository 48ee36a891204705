#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// HSIT container: magic "HSIT", version u16, dtype u8 (0=f32, 1=f64),
// ndim u8, dims u64 little-endian, then the row-major payload.
// Bundles ("HSIB") hold a manifest of named HSIT records for model weights.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kHsitVersion = 1;

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() {
  return 0;
}
template <>
constexpr std::uint8_t dtype_code<double>() {
  return 1;
}

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IntegrityError(std::string("truncated container while reading ") + what);
}

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  write_bytes(os, buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  read_bytes(is, buf, sizeof(U), what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <typename T>
void write_tensor_record(std::ostream& os, const Tensor<T>& t) {
  write_bytes(os, "HSIT", 4);
  write_le<std::uint16_t>(os, kHsitVersion);
  write_le<std::uint8_t>(os, dtype_code<T>());
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d = 0; d < t.ndim(); ++d) write_le<std::uint64_t>(os, t.extent(d));
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  for (const T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_le<std::uint32_t>(os, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      write_le<std::uint64_t>(os, bits);
    }
  }
}

template <typename T>
Tensor<T> read_tensor_record(std::istream& is) {
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "HSIT", 4) != 0) throw FormatError("bad magic, not an HSIT container");
  const auto version = read_le<std::uint16_t>(is, "version");
  if (version != kHsitVersion)
    throw VersionError("HSIT version " + std::to_string(version) + ", expected " +
                       std::to_string(kHsitVersion));
  const auto dtype = read_le<std::uint8_t>(is, "dtype");
  if (dtype != dtype_code<T>())
    throw FormatError("dtype code " + std::to_string(dtype) + " does not match requested scalar type");
  const auto ndim = read_le<std::uint8_t>(is, "ndim");
  Shape shape(ndim);
  for (auto& e : shape) e = static_cast<std::size_t>(read_le<std::uint64_t>(is, "dims"));
  std::vector<T> data(shape_numel(shape));
  for (T& v : data) {
    if constexpr (sizeof(T) == 4) {
      const std::uint32_t bits = read_le<std::uint32_t>(is, "payload");
      std::memcpy(&v, &bits, 4);
    } else {
      const std::uint64_t bits = read_le<std::uint64_t>(is, "payload");
      std::memcpy(&v, &bits, 8);
    }
  }
  return Tensor<T>::from(std::move(shape), std::move(data));
}

}  // namespace detail

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for write: " + path);
  detail::write_tensor_record(os, t);
  if (!os) throw FormatError("write failed: " + path);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  return detail::read_tensor_record<T>(is);
}

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void save_bundle(const std::string& path, const NamedTensors<T>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for write: " + path);
  detail::write_bytes(os, "HSIB", 4);
  detail::write_le<std::uint16_t>(os, kHsitVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    detail::write_bytes(os, name.data(), name.size());
    detail::write_tensor_record(os, tensor);
  }
  if (!os) throw FormatError("write failed: " + path);
}

template <typename T>
NamedTensors<T> load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4, "bundle magic");
  if (std::memcmp(magic, "HSIB", 4) != 0) throw FormatError("bad magic, not an HSIB bundle");
  const auto version = detail::read_le<std::uint16_t>(is, "bundle version");
  if (version != kHsitVersion)
    throw VersionError("HSIB version " + std::to_string(version) + ", expected " +
                       std::to_string(kHsitVersion));
  const auto count = detail::read_le<std::uint32_t>(is, "entry count");
  NamedTensors<T> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint16_t>(is, "entry name length");
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len, "entry name");
    out.emplace_back(std::move(name), detail::read_tensor_record<T>(is));
  }
  return out;
}

}  // namespace mst
