// SPDX-License-Identifier: Apache-2.0
//
// "CMAT" binary tensor container:
//   bytes 0..3  magic 43 4D 41 54
//   byte  4     version (1)
//   byte  5     dtype code (1=f32, 2=u8, 3=i32, 4=f64)
//   byte  6     rank
//   byte  7     reserved (0)
//   rank x u32 little-endian extents, then the row-major little-endian payload.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "cma/tensor.hpp"

namespace cma {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cmat_detail {

inline constexpr std::array<std::uint8_t, 4> kMagic{0x43, 0x4D, 0x41, 0x54};
inline constexpr std::uint8_t kVersion = 1;

template <class T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::endian::native == std::endian::little,
                "CMAT I/O assumes a little-endian host");
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T read_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace cmat_detail

template <Element T>
std::vector<std::uint8_t> encode_cmat(const Tensor<T>& t) {
  using namespace cmat_detail;
  if (t.rank() > 255) throw FormatError("CMAT rank exceeds 255");
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>::value));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  out.push_back(0);
  for (std::size_t e : t.shape()) {
    if (e > 0xFFFFFFFFu) throw FormatError("CMAT extent exceeds u32");
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), bytes, bytes + t.size() * sizeof(T));
  return out;
}

struct CmatHeader {
  DType dtype;
  Shape shape;
  std::size_t payload_offset;
};

inline CmatHeader parse_cmat_header(const std::vector<std::uint8_t>& bytes) {
  using namespace cmat_detail;
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("not a CMAT stream (bad magic)");
  }
  if (bytes[4] != kVersion) {
    throw FormatError("unsupported CMAT version " + std::to_string(bytes[4]));
  }
  const std::uint8_t code = bytes[5];
  if (code < 1 || code > 4) {
    throw FormatError("unknown CMAT dtype code " + std::to_string(code));
  }
  if (bytes[7] != 0) throw FormatError("CMAT reserved byte must be 0");
  const std::size_t rank = bytes[6];
  const std::size_t header = 8 + 4 * rank;
  if (bytes.size() < header) throw FormatError("truncated CMAT header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = read_le<std::uint32_t>(bytes.data() + 8 + 4 * i);
  }
  return {static_cast<DType>(code), std::move(shape), header};
}

template <Element T>
Tensor<T> decode_cmat(const std::vector<std::uint8_t>& bytes) {
  CmatHeader h = parse_cmat_header(bytes);
  if (h.dtype != dtype_of<T>::value) {
    throw FormatError("CMAT dtype code " +
                      std::to_string(static_cast<int>(h.dtype)) +
                      " does not match requested element type");
  }
  const std::size_t n = numel(h.shape);
  if (bytes.size() != h.payload_offset + n * sizeof(T)) {
    throw FormatError("CMAT payload length mismatch");
  }
  std::vector<T> data(n);
  if (n) std::memcpy(data.data(), bytes.data() + h.payload_offset, n * sizeof(T));
  return Tensor<T>(std::move(h.shape), std::move(data));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <Element T>
void write_cmat(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode_cmat(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <Element T>
Tensor<T> read_cmat(const std::filesystem::path& path) {
  return decode_cmat<T>(read_file_bytes(path));
}

}  // namespace cma
