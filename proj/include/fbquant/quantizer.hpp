// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fbquant/linalg.hpp"

namespace fbq {

enum class QuantScheme { kAsymmetricMinMax };
enum class Rounding { kHalfAwayFromZero };

struct QuantConfig {
  int bits = 4;
  std::size_t group_size = 128;
  QuantScheme scheme = QuantScheme::kAsymmetricMinMax;
  Rounding rounding = Rounding::kHalfAwayFromZero;

  /// Throws ValueError unless 2 <= bits <= 8 and group_size >= 1.
  void validate() const;

  std::uint32_t max_code() const noexcept { return (1u << bits) - 1u; }

  // The last group of a row may be short.
  std::size_t groups_per_row(std::size_t in_dim) const noexcept {
    return (in_dim + group_size - 1) / group_size;
  }

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

/// Bytes needed for one row of `cols` codes at `bits` each, padded to a byte.
constexpr std::size_t packed_row_bytes(std::size_t cols, int bits) noexcept {
  return (cols * static_cast<std::size_t>(bits) + 7) / 8;
}

/// Reads code `idx` from a row packed LSB-first.
inline std::uint32_t read_code(const std::uint8_t* row, std::size_t idx, int bits) noexcept {
  const std::size_t bit = idx * static_cast<std::size_t>(bits);
  const std::size_t byte = bit >> 3;
  const unsigned shift = static_cast<unsigned>(bit & 7u);
  std::uint32_t v = row[byte];
  if (shift + static_cast<unsigned>(bits) > 8u) v |= static_cast<std::uint32_t>(row[byte + 1]) << 8;
  return (v >> shift) & ((1u << bits) - 1u);
}

/// Group-wise affine quantized weights. Codes are packed row by row; scales
/// and zero points are stored per (row, group) in row-major order.
struct QuantizedTensor {
  std::size_t out_dim = 0;
  std::size_t in_dim = 0;
  QuantConfig config;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;
  std::vector<std::int32_t> zero_points;

  std::size_t groups() const noexcept { return config.groups_per_row(in_dim); }
  std::size_t row_bytes() const noexcept { return packed_row_bytes(in_dim, config.bits); }

  const std::uint8_t* code_row(std::size_t r) const noexcept { return codes.data() + r * row_bytes(); }

  std::uint32_t code(std::size_t r, std::size_t c) const noexcept {
    return read_code(code_row(r), c, config.bits);
  }
  float scale(std::size_t r, std::size_t c) const noexcept {
    return scales[r * groups() + c / config.group_size];
  }
  std::int32_t zero_point(std::size_t r, std::size_t c) const noexcept {
    return zero_points[r * groups() + c / config.group_size];
  }

  /// Largest group scale divided by two: the rounding-error bound.
  double max_half_scale() const noexcept;

  /// Throws FormatError if payload sizes, padding bits or scales are corrupt.
  void validate() const;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Round-to-nearest asymmetric min-max quantization, one scale and zero point
/// per group of `config.group_size` consecutive inputs. Throws NumericError
/// for non-finite weights or groups whose scale would overflow f32.
QuantizedTensor quantize_rtn(const MatrixD& w, const QuantConfig& config);

/// (code - zero_point) * scale for every entry.
MatrixD dequantize(const QuantizedTensor& q);

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, std::size_t rows,
                                     std::size_t cols, int bits);

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t rows,
                                        std::size_t cols, int bits);

/// Per-entry half scale, same shape as the quantized weights.
MatrixD half_scale_map(const QuantizedTensor& q);

/// Number of entries where |reference - reconstructed| exceeds the entry's
/// half scale.
std::size_t count_bound_violations(const MatrixD& reference, const MatrixD& reconstructed,
                                   const QuantizedTensor& q);

}  // namespace fbq
