#pragma once

// FMAT: minimal tensor container.
//
//   offset  size      field
//   0       4         magic "FMAT"
//   4       4         u32 version (1)
//   8       1         u8 dtype code (1 = float32, 2 = float64)
//   9       4         u32 rank
//   13      8*rank    u64 dims
//   ...     n*width   payload, row-major, IEEE-754 little-endian
//
// All integers are little-endian. The payload must hold exactly
// product(dims) values; trailing bytes are rejected.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "hilcbm/error.hpp"
#include "hilcbm/tensor.hpp"

namespace hilcbm::fmat {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'F', 'M', 'A', 'T'};

namespace detail {

template <class UInt>
void put_le(std::string& out, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class UInt>
UInt get_le(std::string_view bytes, std::size_t& pos, const char* what) {
  require(pos + sizeof(UInt) <= bytes.size(), ErrorKind::format,
          std::string("truncated header reading ") + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += sizeof(UInt);
  return static_cast<UInt>(v);
}

}  // namespace detail

inline std::string encode(const Tensor& tensor) {
  require(tensor.all_finite(), ErrorKind::non_finite, "refusing to encode a non-finite tensor");
  std::string out(kMagic, 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  out.push_back(static_cast<char>(tensor.dtype()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) detail::put_le<std::uint64_t>(out, d);
  if (tensor.dtype() == DType::float64) {
    for (double v : tensor.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  } else {
    for (double v : tensor.values())
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Tensor decode(std::string_view bytes) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::format,
          "bad magic, not an FMAT file");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos, "version");
  require(version == kVersion, ErrorKind::version,
          "unsupported FMAT version " + std::to_string(version));
  const auto code = detail::get_le<std::uint8_t>(bytes, pos, "dtype");
  require(code == 1 || code == 2, ErrorKind::format, "unknown dtype code " + std::to_string(code));
  const DType dtype = static_cast<DType>(code);
  const auto rank = detail::get_le<std::uint32_t>(bytes, pos, "rank");
  require(rank <= 16, ErrorKind::format, "implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos, "dims"));
  const std::size_t count = element_count(shape);
  const std::size_t width = dtype == DType::float64 ? 8 : 4;
  const std::size_t payload = bytes.size() - pos;
  require(payload % width == 0 && payload / width == count, ErrorKind::shape_mismatch,
          "header shape " + shape_string(shape) + " expects " + std::to_string(count) +
              " values, payload holds " + std::to_string(payload / width) +
              (payload % width ? " (plus a partial value)" : ""));
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = dtype == DType::float64
                  ? std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos, "payload"))
                  : static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos, "payload")));
    require(std::isfinite(data[i]), ErrorKind::non_finite,
            "non-finite value at flat index " + std::to_string(i));
  }
  return Tensor(std::move(shape), std::move(data), dtype);
}

inline void write(const Tensor& tensor, const std::filesystem::path& path) {
  const std::string bytes = encode(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

inline Tensor read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.message());
  }
}

}  // namespace hilcbm::fmat
