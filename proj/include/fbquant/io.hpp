// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// File formats.
//
// Calibration bundles are safetensors files: an 8-byte little-endian header
// length, a JSON header mapping tensor names to {dtype, shape, data_offsets},
// then the raw row-major payload. Layer L is described by "L.weight"
// (out_dim x in_dim) and "L.calib_x" (samples x in_dim; leading dimensions
// beyond two are flattened into samples).
//
// Quantized models are FBQ1 containers:
//
//   "FBQ1" | u64 LE header_len | JSON header | payload
//
// The header carries format_version (1), the quantizer config and, per layer,
// {name, out_dim, in_dim, rank, codes, scales, zeros, a, b} where each buffer
// entry is {offset, length} relative to the payload start. Buffers tile the
// payload exactly in header order: bit-packed codes, f32 scales, i32 zero
// points, then A and B as row-major f32.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fbquant/fbcore.hpp"

namespace fbq {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr int kFbqFormatVersion = 1;

enum class TensorDtype { kF32, kF64 };

std::vector<LayerRecord> parse_bundle(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_bundle(const std::vector<LayerRecord>& layers, TensorDtype dtype = TensorDtype::kF64);

std::vector<LayerRecord> load_bundle(const std::filesystem::path& path);
void save_bundle(const std::filesystem::path& path, const std::vector<LayerRecord>& layers,
                 TensorDtype dtype = TensorDtype::kF64);

struct FbqLayer {
  std::string name;
  QuantizedTensor q;
  SubBranch sub;  // values are exactly representable in f32
};

struct FbqModel {
  QuantConfig qconfig;
  std::vector<FbqLayer> layers;
};

/// All layers must share one quantizer config. A and B are stored as f32.
std::vector<std::uint8_t> encode_fbq(const std::vector<LayerResult>& results);
FbqModel decode_fbq(std::span<const std::uint8_t> bytes);

void save_fbq(const std::filesystem::path& path, const std::vector<LayerResult>& results);
FbqModel load_fbq(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace fbq
