#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "maskanneal/mat.hpp"
#include "maskanneal/pattern.hpp"

namespace maskanneal {

/// Compressed storage for a 2:4-sparse DxC matrix: the two kept weights of
/// every group of four, row-major, plus a stream of 2-bit in-group position
/// codes (four codes per byte, low bits first). Values are stored as 32-bit
/// floats, matching the on-disk format.
struct Packed24Matrix {
  std::uint32_t rows = 0, cols = 0;
  std::vector<float> values;        // rows * cols/2 kept weights
  std::vector<std::uint8_t> codes;  // ceil(rows*cols/2 * 2 / 8) bytes

  std::size_t value_count() const { return std::size_t(rows) * cols / 2; }

  int code_at(std::size_t k) const {
    return (codes[k >> 2] >> (2 * (k & 3))) & 3;
  }
  void set_code(std::size_t k, int code) {
    codes[k >> 2] |= std::uint8_t(code & 3) << (2 * (k & 3));
  }
};

inline Packed24Matrix pack_24(const Mat& dense, const Mat& mask) {
  require(dense.same_shape(mask), "pack_24: dense/mask shape mismatch");
  auto pattern = SparsityPattern::nofm(2, 4);
  FeasibilityReport rep = check_feasible(mask, pattern);
  if (!rep.ok) throw std::invalid_argument("pack_24: infeasible mask: " + rep.message);

  Packed24Matrix out;
  out.rows = std::uint32_t(dense.rows());
  out.cols = std::uint32_t(dense.cols());
  out.values.reserve(out.value_count());
  out.codes.assign((out.value_count() * 2 + 7) / 8, 0);

  std::size_t k = 0;
  for (std::size_t r = 0; r < dense.rows(); ++r) {
    for (std::size_t g = 0; g < dense.cols() / 4; ++g) {
      for (int j = 0; j < 4; ++j) {
        if (mask(r, g * 4 + std::size_t(j)) == 1.0) {
          out.values.push_back(float(dense(r, g * 4 + std::size_t(j))));
          out.set_code(k++, j);
        }
      }
    }
  }
  return out;
}

inline Mat unpack_24(const Packed24Matrix& p) {
  Mat out(p.rows, p.cols, 0.0);
  std::size_t k = 0;
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t g = 0; g < std::size_t(p.cols) / 4; ++g)
      for (int j = 0; j < 2; ++j, ++k)
        out(r, g * 4 + std::size_t(p.code_at(k))) = double(p.values[k]);
  return out;
}

/// Y = X * (m .* W)^T computed directly from packed storage; X is BxC,
/// the result BxD.
inline Mat spmm_24(const Packed24Matrix& p, const Mat& x) {
  require(x.cols() == p.cols, "spmm_24: inner dimension mismatch");
  Mat y(x.rows(), p.rows, 0.0);
  const std::size_t vals_per_row = std::size_t(p.cols) / 2;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    const double* xb = x.data() + b * x.cols();
    for (std::size_t d = 0; d < p.rows; ++d) {
      double acc = 0.0;
      std::size_t k = d * vals_per_row;
      for (std::size_t g = 0; g < std::size_t(p.cols) / 4; ++g) {
        acc += double(p.values[k]) * xb[g * 4 + std::size_t(p.code_at(k))];
        ++k;
        acc += double(p.values[k]) * xb[g * 4 + std::size_t(p.code_at(k))];
        ++k;
      }
      y(b, d) = acc;
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// File format (see docs/packed24_format.md): header {magic "NM24", version
// u16, D u32, C u32}, then D*C/2 little-endian f32 values, then the code
// bytes. All multi-byte fields little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::string& s, std::uint16_t x) {
  s.push_back(char(x & 0xff));
  s.push_back(char((x >> 8) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) s.push_back(char((x >> (8 * i)) & 0xff));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline constexpr std::uint16_t kPacked24Version = 1;

inline std::string serialize_packed24(const Packed24Matrix& p) {
  std::string out;
  out.reserve(14 + p.values.size() * 4 + p.codes.size());
  out += "NM24";
  detail::put_u16(out, kPacked24Version);
  detail::put_u32(out, p.rows);
  detail::put_u32(out, p.cols);
  for (float v : p.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  out.append(reinterpret_cast<const char*>(p.codes.data()), p.codes.size());
  return out;
}

inline Packed24Matrix deserialize_packed24(const std::string& buf) {
  require(buf.size() >= 14, "packed24: truncated header");
  require(buf.compare(0, 4, "NM24") == 0, "packed24: bad magic");
  const auto* b = reinterpret_cast<const std::uint8_t*>(buf.data());
  std::uint16_t version = detail::get_u16(b + 4);
  require(version == kPacked24Version, "packed24: unsupported version");
  Packed24Matrix p;
  p.rows = detail::get_u32(b + 6);
  p.cols = detail::get_u32(b + 10);
  require(p.cols % 4 == 0, "packed24: cols not a multiple of 4");
  const std::size_t nv = p.value_count();
  const std::size_t nc = (nv * 2 + 7) / 8;
  require(buf.size() == 14 + nv * 4 + nc, "packed24: size mismatch");
  p.values.resize(nv);
  for (std::size_t i = 0; i < nv; ++i)
    p.values[i] = std::bit_cast<float>(detail::get_u32(b + 14 + i * 4));
  p.codes.assign(b + 14 + nv * 4, b + 14 + nv * 4 + nc);
  // each group contributes two codes, strictly increasing
  for (std::size_t k = 0; k + 1 < nv; k += 2)
    require(p.code_at(k) < p.code_at(k + 1), "packed24: codes not increasing within group");
  return p;
}

inline void save_packed24(const Packed24Matrix& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), "cannot open " + path + " for writing");
  std::string s = serialize_packed24(p);
  f.write(s.data(), std::streamsize(s.size()));
  require(bool(f), "write failed: " + path);
}

inline Packed24Matrix load_packed24(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_packed24(buf);
}

}  // namespace maskanneal
