#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "vcaps/tensor.hpp"

// Tensor container record:
//   "VCT1" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u32 LE extents | LE row-major payload
// Records may be concatenated; shards and checkpoints are sequences of records.
namespace vcaps::io {

inline constexpr std::array<char, 4> kTensorMagic{'V', 'C', 'T', '1'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "only f32/f64 tensors are persisted");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw IoError("tensor container: truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<U>(v);
}

template <typename F>
void write_payload(std::ostream& os, std::span<const F> data) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  } else {
    using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    for (F v : data) put_le(os, std::bit_cast<Bits>(v));
  }
}

template <typename F>
void read_payload(std::istream& is, std::span<F> data) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    if (!is) throw IoError("tensor container: truncated payload");
  } else {
    using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    for (F& v : data) v = std::bit_cast<F>(get_le<Bits>(is));
  }
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw UsageError("tensor container: rank exceeds 255");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::put_le(os, static_cast<std::uint8_t>(dtype_of<T>()));
  detail::put_le(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > 0xffffffffULL) throw UsageError("tensor container: extent exceeds u32");
    detail::put_le(os, static_cast<std::uint32_t>(e));
  }
  detail::write_payload(os, t.data());
  if (!os) throw IoError("tensor container: write failed");
}

// Reads one record, converting the stored dtype to T when they differ.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is) throw IoError("tensor container: truncated magic");
  if (magic != kTensorMagic) throw IoError("tensor container: bad magic");
  const auto dtype = detail::get_le<std::uint8_t>(is);
  const auto rank = detail::get_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = detail::get_le<std::uint32_t>(is);
  if (dtype == static_cast<std::uint8_t>(DType::f32)) {
    Tensor<float> t(shape);
    detail::read_payload(is, t.data());
    if constexpr (std::is_same_v<T, float>) return t;
    else return t.template cast<T>();
  }
  if (dtype == static_cast<std::uint8_t>(DType::f64)) {
    Tensor<double> t(shape);
    detail::read_payload(is, t.data());
    if constexpr (std::is_same_v<T, double>) return t;
    else return t.template cast<T>();
  }
  throw IoError("tensor container: unknown dtype code " + std::to_string(dtype));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace vcaps::io
