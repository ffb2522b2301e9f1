#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/tensor.hpp"

namespace gabortex {

// "TNSR" file format: magic bytes, little-endian u32 version (=1), u32 ndim,
// ndim x u32 extents, then row-major 32-bit little-endian floats.

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string buf;
  buf.reserve(16 + t.data.size() * 4);
  buf += "TNSR";
  detail::put_u32(buf, 1);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
  for (int e : t.shape) detail::put_u32(buf, static_cast<std::uint32_t>(e));
  for (double d : t.data) {
    float f = static_cast<float>(d);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(buf, bits);
  }
  return buf;
}

// parses one tensor starting at `offset`; advances offset past it
inline Tensor decode_tensor(const std::string& buf, std::size_t& offset,
                            const std::string& context) {
  auto fail = [&context](const std::string& what) -> Tensor {
    throw std::runtime_error("TNSR " + context + ": " + what);
  };
  const unsigned char* base = reinterpret_cast<const unsigned char*>(buf.data());
  std::size_t n = buf.size();
  if (offset + 12 > n) return fail("truncated header");
  if (std::memcmp(base + offset, "TNSR", 4) != 0) return fail("bad magic");
  std::uint32_t version = detail::get_u32(base + offset + 4);
  if (version != 1) return fail("unsupported version " + std::to_string(version));
  std::uint32_t ndim = detail::get_u32(base + offset + 8);
  if (ndim == 0 || ndim > 8) return fail("bad dimension count");
  if (offset + 12 + 4ull * ndim > n) return fail("truncated extents");
  std::vector<int> shape(ndim);
  std::uint64_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint32_t e = detail::get_u32(base + offset + 12 + 4 * i);
    if (e == 0 || e > (1u << 24)) return fail("bad extent");
    numel *= e;
    if (numel > (1ull << 31)) return fail("extent product overflow");
    shape[i] = static_cast<int>(e);
  }
  std::size_t data_off = offset + 12 + 4ull * ndim;
  if (data_off + 4 * numel > n) return fail("truncated data");
  Tensor t(shape);
  for (std::uint64_t i = 0; i < numel; ++i) {
    std::uint32_t bits = detail::get_u32(base + data_off + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    t.data[i] = static_cast<double>(f);
  }
  offset = data_off + 4 * numel;
  return t;
}

inline void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_tensor: cannot open " + path);
  std::string buf = encode_tensor(t);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write_tensor: write failed for " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline Tensor read_tensor(const std::string& path) {
  std::string buf = read_file_bytes(path);
  std::size_t offset = 0;
  Tensor t = decode_tensor(buf, offset, path);
  if (offset != buf.size()) throw std::runtime_error("TNSR " + path + ": trailing bytes");
  return t;
}

}  // namespace gabortex
