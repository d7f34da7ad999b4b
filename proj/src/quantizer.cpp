// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fbq {

namespace {

// |min| / scale above this would overflow the int32 zero point.
constexpr double kMaxZeroRatio = 1073741824.0;  // 2^30

struct GroupParams {
  float scale;
  std::int32_t zero;
};

// Degenerate group: every value equals c (or the range collapsed below what
// an f32 scale can resolve). scale = |c| maps c onto code z±1 exactly.
GroupParams degenerate_params(double c) {
  if (std::abs(c) > std::numeric_limits<float>::max())
    throw NumericError("quantize_rtn: weight magnitude exceeds the f32 scale range");
  const float s = static_cast<float>(std::abs(c));
  if (c == 0.0 || !std::isnormal(s)) return {1.0f, static_cast<std::int32_t>(std::round(-c))};
  return {s, c > 0.0 ? 0 : 1};
}

GroupParams group_params(std::span<const double> values, std::uint32_t qmax) {
  const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it;
  const double mx = *mx_it;
  if (!std::isfinite(mn) || !std::isfinite(mx)) throw NumericError("quantize_rtn: non-finite weight");
  if (mx == mn) return degenerate_params(mn);
  if ((mx - mn) / static_cast<double>(qmax) > std::numeric_limits<float>::max())
    throw NumericError("quantize_rtn: group range exceeds the f32 scale range");
  float s = static_cast<float>((mx - mn) / static_cast<double>(qmax));
  // Round up when the nearest f32 no longer covers the range; otherwise the
  // top value can need code qmax + 1 and clamp past s/2.
  while (std::isnormal(s) && (mx - mn) / static_cast<double>(s) > static_cast<double>(qmax))
    s = std::nextafter(s, std::numeric_limits<float>::infinity());
  if (!std::isnormal(s) || std::abs(mn) / static_cast<double>(s) >= kMaxZeroRatio)
    return degenerate_params(mn);
  return {s, static_cast<std::int32_t>(std::round(-mn / static_cast<double>(s)))};
}

std::uint32_t encode(double w, GroupParams p, std::uint32_t qmax) {
  const double q = std::round(w / static_cast<double>(p.scale)) + static_cast<double>(p.zero);
  return static_cast<std::uint32_t>(std::clamp(q, 0.0, static_cast<double>(qmax)));
}

void write_code(std::uint8_t* row, std::size_t idx, int bits, std::uint32_t code) {
  const std::size_t bit = idx * static_cast<std::size_t>(bits);
  const std::size_t byte = bit >> 3;
  const unsigned shift = static_cast<unsigned>(bit & 7u);
  const std::uint32_t v = code << shift;
  row[byte] |= static_cast<std::uint8_t>(v & 0xffu);
  if (shift + static_cast<unsigned>(bits) > 8u) row[byte + 1] |= static_cast<std::uint8_t>(v >> 8);
}

}  // namespace

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw ValueError("quant config: bits must be in [2, 8], got " + std::to_string(bits));
  if (group_size < 1) throw ValueError("quant config: group_size must be >= 1");
}

double QuantizedTensor::max_half_scale() const noexcept {
  float m = 0.0f;
  for (float s : scales) m = std::max(m, s);
  return static_cast<double>(m) / 2.0;
}

void QuantizedTensor::validate() const {
  config.validate();
  const std::size_t rb = row_bytes();
  if (codes.size() != out_dim * rb) {
    throw FormatError("quantized tensor: codes payload is " + std::to_string(codes.size()) +
                      " bytes, expected " + std::to_string(out_dim * rb));
  }
  const std::size_t ng = out_dim * groups();
  if (scales.size() != ng || zero_points.size() != ng) {
    throw FormatError("quantized tensor: expected " + std::to_string(ng) + " scales and zero points");
  }
  const std::size_t used_bits = in_dim * static_cast<std::size_t>(config.bits);
  if (used_bits % 8 != 0) {
    const auto pad_mask = static_cast<std::uint8_t>(0xffu << (used_bits % 8));
    for (std::size_t r = 0; r < out_dim; ++r) {
      if (codes[r * rb + rb - 1] & pad_mask)
        throw FormatError("quantized tensor: nonzero padding bits in row " + std::to_string(r));
    }
  }
  for (float s : scales) {
    if (!(std::isfinite(s) && s > 0.0f)) throw FormatError("quantized tensor: non-positive or non-finite scale");
  }
}

QuantizedTensor quantize_rtn(const MatrixD& w, const QuantConfig& config) {
  config.validate();
  QuantizedTensor q;
  q.out_dim = w.rows();
  q.in_dim = w.cols();
  q.config = config;
  const std::size_t ng = q.groups();
  const std::size_t rb = q.row_bytes();
  const std::uint32_t qmax = config.max_code();
  q.codes.assign(q.out_dim * rb, 0);
  q.scales.resize(q.out_dim * ng);
  q.zero_points.resize(q.out_dim * ng);

  for (std::size_t r = 0; r < q.out_dim; ++r) {
    const auto row = w.row(r);
    std::uint8_t* packed = q.codes.data() + r * rb;
    for (std::size_t g = 0; g < ng; ++g) {
      const std::size_t begin = g * config.group_size;
      const std::size_t len = std::min(config.group_size, q.in_dim - begin);
      const auto group = row.subspan(begin, len);
      const GroupParams p = group_params(group, qmax);
      q.scales[r * ng + g] = p.scale;
      q.zero_points[r * ng + g] = p.zero;
      for (std::size_t i = 0; i < len; ++i) write_code(packed, begin + i, config.bits, encode(group[i], p, qmax));
    }
  }
  return q;
}

MatrixD dequantize(const QuantizedTensor& q) {
  q.validate();
  MatrixD w(q.out_dim, q.in_dim);
  const std::size_t gs = q.config.group_size;
  const std::size_t ng = q.groups();
  for (std::size_t r = 0; r < q.out_dim; ++r) {
    const std::uint8_t* packed = q.code_row(r);
    for (std::size_t c = 0; c < q.in_dim; ++c) {
      const std::size_t g = r * ng + c / gs;
      const auto code = static_cast<double>(read_code(packed, c, q.config.bits));
      w(r, c) = (code - static_cast<double>(q.zero_points[g])) * static_cast<double>(q.scales[g]);
    }
  }
  return w;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, std::size_t rows, std::size_t cols,
                                     int bits) {
  if (bits < 1 || bits > 8) throw ValueError("pack_codes: bits must be in [1, 8]");
  if (codes.size() != rows * cols) throw ShapeError("pack_codes: code count does not match rows x cols");
  const std::size_t rb = packed_row_bytes(cols, bits);
  const std::uint32_t limit = 1u << bits;
  std::vector<std::uint8_t> out(rows * rb, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::uint32_t code = codes[r * cols + c];
      if (code >= limit) {
        throw ValueError("pack_codes: code " + std::to_string(code) + " at (" + std::to_string(r) + ", " +
                         std::to_string(c) + ") does not fit in " + std::to_string(bits) + " bits");
      }
      write_code(out.data() + r * rb, c, bits, code);
    }
  }
  return out;
}

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t rows, std::size_t cols,
                                        int bits) {
  if (bits < 1 || bits > 8) throw ValueError("unpack_codes: bits must be in [1, 8]");
  const std::size_t rb = packed_row_bytes(cols, bits);
  if (packed.size() != rows * rb) throw FormatError("unpack_codes: payload size does not match rows x cols");
  std::vector<std::uint32_t> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = read_code(packed.data() + r * rb, c, bits);
  return out;
}

MatrixD half_scale_map(const QuantizedTensor& q) {
  MatrixD m(q.out_dim, q.in_dim);
  for (std::size_t r = 0; r < q.out_dim; ++r)
    for (std::size_t c = 0; c < q.in_dim; ++c) m(r, c) = static_cast<double>(q.scale(r, c)) / 2.0;
  return m;
}

std::size_t count_bound_violations(const MatrixD& reference, const MatrixD& reconstructed,
                                   const QuantizedTensor& q) {
  detail::require_same_shape(reference, reconstructed, "count_bound_violations");
  if (reference.rows() != q.out_dim || reference.cols() != q.in_dim)
    throw ShapeError("count_bound_violations: quantized tensor shape mismatch");
  std::size_t n = 0;
  for (std::size_t r = 0; r < q.out_dim; ++r)
    for (std::size_t c = 0; c < q.in_dim; ++c)
      if (std::abs(reference(r, c) - reconstructed(r, c)) > static_cast<double>(q.scale(r, c)) / 2.0) ++n;
  return n;
}

}  // namespace fbq
