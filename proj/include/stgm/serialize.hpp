#pragma once

// Binary tensor container and debugging CSV export.
//
// Container layout (all integers and payload little-endian):
//   "STGT"  u32 version  u32 rank  u64 extent[rank]  f64 value[numel]

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <system_error>

#include "stgm/errors.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

inline constexpr std::array<char, 4> kTensorMagic{'S', 'T', 'G', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> buf;
  std::memcpy(buf.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  os.write(buf.data(), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> buf;
  if (!is.read(buf.data(), sizeof(T))) throw IoError("tensor container: truncated input");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  T v;
  std::memcpy(&v, buf.data(), sizeof(T));
  return v;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ContractError("cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_le<std::uint32_t>(os, kTensorVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::write_le<std::uint64_t>(os, e);
  for (double v : t.values()) detail::write_le<double>(os, v);
  if (!os) throw IoError("tensor container: write failed");
}

// Reads one container; the magic must be at the current stream position.
inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw IoError("tensor container: bad magic");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kTensorVersion) throw IoError("tensor container: unsupported version " + std::to_string(version));
  const auto rank = detail::read_le<std::uint32_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = detail::read_le<double>(is);
  return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_tensor(is);
}

// One row per flattened element: flat index, multi-index, value.
inline void write_tensor_csv(std::ostream& os, const Tensor& t) {
  os << "flat_index";
  for (std::size_t a = 0; a < t.rank(); ++a) os << ",i" << a;
  os << ",value\n";
  std::vector<std::size_t> idx(t.rank(), 0);
  for (std::size_t f = 0; f < t.numel(); ++f) {
    os << f;
    for (auto i : idx) os << ',' << i;
    os << ',' << detail::format_double(t[f]) << '\n';
    for (std::size_t a = t.rank(); a-- > 0;) {
      if (++idx[a] < t.dim(a)) break;
      idx[a] = 0;
    }
  }
}

}  // namespace stgm
