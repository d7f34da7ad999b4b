// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Inference path of a quantized linear layer with a low-rank sub-branch,
// y = x·W'ᵀ + (x·Aᵀ)·Bᵀ. The naive variant runs four kernels (dequantize,
// main matmul, down projection, up projection); the fused variant runs two
// (down projection, then dequantize + matmul + up projection into the same
// output tile). Both report compulsory memory traffic through a counter:
// every kernel reads each of its input elements once and writes each output
// element once.

#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fbquant/fbcore.hpp"
#include "fbquant/quantizer.hpp"

namespace fbq {

enum class TrafficBuffer : std::size_t {
  kActivations,
  kCodes,
  kScales,
  kZeroPoints,
  kAdapterA,
  kAdapterB,
  kIntermediate,
  kDequantTemp,
  kOutput,
};
inline constexpr std::size_t kTrafficBufferCount = 9;

const char* traffic_buffer_name(TrafficBuffer b) noexcept;

struct TrafficSnapshot {
  std::array<std::uint64_t, kTrafficBufferCount> read{};
  std::array<std::uint64_t, kTrafficBufferCount> written{};
  std::uint64_t kernels_launched = 0;
  std::uint64_t macs = 0;

  std::uint64_t bytes_read() const noexcept;
  std::uint64_t bytes_written() const noexcept;
  std::uint64_t read_of(TrafficBuffer b) const noexcept { return read[static_cast<std::size_t>(b)]; }
  std::uint64_t written_of(TrafficBuffer b) const noexcept { return written[static_cast<std::size_t>(b)]; }

  friend bool operator==(const TrafficSnapshot&, const TrafficSnapshot&) = default;
};

/// Thread-safe traffic accounting. Workers may add concurrently; totals do
/// not depend on the schedule.
class TrafficCounter {
 public:
  TrafficCounter() { reset(); }
  TrafficCounter(const TrafficCounter&) = delete;
  TrafficCounter& operator=(const TrafficCounter&) = delete;

  void add(const TrafficSnapshot& delta) noexcept;
  void read(TrafficBuffer b, std::uint64_t bytes) noexcept;
  void write(TrafficBuffer b, std::uint64_t bytes) noexcept;
  void launch() noexcept { kernels_.fetch_add(1, std::memory_order_relaxed); }
  void add_macs(std::uint64_t n) noexcept { macs_.fetch_add(n, std::memory_order_relaxed); }

  void reset() noexcept;
  TrafficSnapshot snapshot() const noexcept;

  std::uint64_t bytes_read() const noexcept { return snapshot().bytes_read(); }
  std::uint64_t bytes_written() const noexcept { return snapshot().bytes_written(); }
  std::uint64_t kernels_launched() const noexcept { return kernels_.load(std::memory_order_relaxed); }
  std::uint64_t macs() const noexcept { return macs_.load(std::memory_order_relaxed); }

 private:
  std::array<std::atomic<std::uint64_t>, kTrafficBufferCount> read_;
  std::array<std::atomic<std::uint64_t>, kTrafficBufferCount> written_;
  std::atomic<std::uint64_t> kernels_;
  std::atomic<std::uint64_t> macs_;
};

struct ForwardOptions {
  std::size_t threads = 1;
  // When set, resized to batch x out_dim and incremented on every output
  // element store.
  std::vector<std::uint32_t>* write_shadow = nullptr;
};

template <typename T>
struct FusedLayer {
  QuantizedTensor q;
  Matrix<T> a;  // rank x in_dim
  Matrix<T> b;  // out_dim x rank
  Matrix<T> workspace;  // batch x rank, resized on demand

  std::size_t rank() const noexcept { return a.rows(); }
  void validate() const;
};

/// Wraps quantized weights and a sub-branch, casting the factors to T.
template <typename T>
FusedLayer<T> make_fused_layer(QuantizedTensor q, const SubBranch& sub);

/// Four-pass reference path: dequantize the full weight matrix to a
/// temporary, main matmul, down projection, up projection added to the output.
template <typename T>
Matrix<T> naive_forward(const QuantizedTensor& q, const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& x,
                        TrafficCounter& counter, const ForwardOptions& opts = {});

/// Two-pass path: down projection into the layer workspace, then one kernel
/// that dequantizes codes group by group, accumulates the main product, adds
/// the up projection and stores each output element once.
template <typename T>
Matrix<T> fused_forward(FusedLayer<T>& layer, const Matrix<T>& x, TrafficCounter& counter,
                        const ForwardOptions& opts = {});

struct CostModelQuery {
  std::uint64_t b = 1;
  std::uint64_t d = 4096;
  std::uint64_t r = 128;
};

struct MacsOverhead {
  std::uint64_t m0 = 0;  // main path, b·d·d
  std::uint64_t m1 = 0;  // sub-branch, 2·b·r·d
  double ratio = 0.0;    // m1 / m0 = 2r/d
};

/// Throws ValueError when d == 0.
MacsOverhead macs_overhead(const CostModelQuery& q);

struct BenchmarkRow {
  std::string variant;
  std::size_t threads = 1;
  CostModelQuery shape;
  int bits = 4;
  std::uint64_t median_ns = 0;
  double tokens_per_s = 0.0;
  TrafficSnapshot counters;
};

struct BenchmarkOptions {
  std::size_t reps = 30;
  int bits = 4;
  std::size_t group_size = 128;
  std::uint64_t seed = 1234;
  // Thread count of the multi-threaded rows; 0 uses the hardware concurrency
  // (at least two).
  std::size_t mt_threads = 0;
  bool multi_threaded = true;
};

/// Times naive and fused forwards on square d x d layers. Warmup runs are
/// excluded; rows report medians and the counters of one forward.
std::vector<BenchmarkRow> benchmark(const std::vector<CostModelQuery>& shapes, const BenchmarkOptions& opts);

/// CSV with columns variant,b,d,r,median_ns,bytes_read,bytes_written,kernels,macs.
std::string benchmark_csv(const std::vector<BenchmarkRow>& rows);

/// Parses "b:d:r[,b:d:r...]"; "decode" and "prefill" expand to 1:4096:128 and
/// 256:4096:128.
std::vector<CostModelQuery> parse_shapes(const std::string& text);

}  // namespace fbq
