#pragma once

// "VOL1" binary tensor container: magic bytes, u8 dtype code (0 = f32),
// u8 rank, rank x u64 little-endian extents, row-major little-endian f32
// payload. Compute stays f64; f32 only at this file boundary.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "brg/tensor.hpp"

namespace brg {

namespace voldet {

inline void put_u64_le(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

inline uint32_t f32_bits(float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

inline float bits_f32(uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace voldet

inline std::string vol_encode(const Tensor& t) {
  std::string buf = "VOL1";
  buf.push_back('\0');  // dtype 0 = f32
  buf.push_back(static_cast<char>(t.rank()));
  for (int64_t e : t.shape()) voldet::put_u64_le(buf, static_cast<uint64_t>(e));
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t u = voldet::f32_bits(static_cast<float>(t[i]));
    for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
  }
  return buf;
}

inline void vol_write(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("vol_write: cannot open " + path);
  std::string buf = vol_encode(t);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("vol_write: write failed for " + path);
}

inline Tensor vol_decode(const std::string& buf, const std::string& what = "buffer") {
  auto fail = [&](const std::string& msg) -> Tensor {
    throw std::runtime_error("VOL1 " + what + ": " + msg);
  };
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 6 || std::memcmp(p, "VOL1", 4) != 0) return fail("bad magic");
  if (p[4] != 0) return fail("unsupported dtype code " + std::to_string(p[4]));
  int rank = p[5];
  size_t off = 6;
  if (buf.size() < off + 8u * rank) return fail("truncated header");
  Shape shape;
  uint64_t n = 1;
  for (int i = 0; i < rank; ++i) {
    uint64_t e = voldet::get_u64_le(p + off);
    off += 8;
    if (e == 0) return fail("zero extent");
    shape.push_back(static_cast<int64_t>(e));
    n *= e;
  }
  if (buf.size() != off + 4 * n)
    return fail("payload length " + std::to_string(buf.size() - off) + " != expected " +
                std::to_string(4 * n));
  std::vector<double> data(n);
  for (uint64_t i = 0; i < n; ++i) {
    uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<uint32_t>(p[off + 4 * i + b]) << (8 * b);
    data[i] = static_cast<double>(voldet::bits_f32(u));
  }
  return Tensor::from(shape, std::move(data));
}

inline Tensor vol_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("vol_read: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return vol_decode(buf, path);
}

}  // namespace brg
