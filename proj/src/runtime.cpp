// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>
#include <thread>

namespace fbq {

namespace {

using Buf = TrafficBuffer;

// Per-worker traffic, flushed into the shared counter once per chunk.
struct LocalTraffic {
  TrafficSnapshot s;
  void read(Buf b, std::uint64_t n) { s.read[static_cast<std::size_t>(b)] += n; }
  void write(Buf b, std::uint64_t n) { s.written[static_cast<std::size_t>(b)] += n; }
};

// Runs fn(begin, end, local) over contiguous chunks of [0, n).
template <typename Fn>
void parallel_rows(std::size_t n, std::size_t threads, TrafficCounter& counter, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    LocalTraffic local;
    fn(std::size_t{0}, n, local);
    counter.add(local.s);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      LocalTraffic local;
      fn(begin, end, local);
      counter.add(local.s);
    });
  }
}

template <typename T>
void check_shapes(const QuantizedTensor& q, const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& x) {
  if (x.cols() != q.in_dim) {
    throw ShapeError("forward: input width " + std::to_string(x.cols()) + " does not match layer in_dim " +
                     std::to_string(q.in_dim));
  }
  if (a.cols() != q.in_dim || b.rows() != q.out_dim || b.cols() != a.rows()) {
    throw ShapeError("forward: sub-branch shapes are inconsistent with the quantized weights");
  }
}

void reset_shadow(const ForwardOptions& opts, std::size_t batch, std::size_t out_dim) {
  if (opts.write_shadow) opts.write_shadow->assign(batch * out_dim, 0);
}

// Decodes one group of codes of row `row` into `dst`.
template <typename T>
void dequantize_group(const QuantizedTensor& q, const std::uint8_t* row, std::size_t begin, std::size_t len, T scale,
                      std::int32_t zero, T* dst) {
  const int bits = q.config.bits;
  for (std::size_t i = 0; i < len; ++i) {
    const auto code = static_cast<std::int32_t>(read_code(row, begin + i, bits));
    dst[i] = static_cast<T>(code - zero) * scale;
  }
}

// t = x·Aᵀ, stored batch x rank. Shared by both variants.
template <typename T>
void down_projection(const Matrix<T>& a, const Matrix<T>& x, Matrix<T>& t, TrafficCounter& counter,
                     std::size_t threads) {
  const std::size_t batch = x.rows();
  const std::size_t in = x.cols();
  const std::size_t rank = a.rows();
  constexpr std::uint64_t sz = sizeof(T);
  counter.launch();
  counter.read(Buf::kActivations, batch * in * sz);
  parallel_rows(rank, threads, counter, [&](std::size_t begin, std::size_t end, LocalTraffic& local) {
    for (std::size_t k = begin; k < end; ++k) {
      const T* ak = a.row(k).data();
      local.read(Buf::kAdapterA, in * sz);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* xb = x.row(bi).data();
        T acc{};
        for (std::size_t c = 0; c < in; ++c) acc += xb[c] * ak[c];
        t(bi, k) = acc;
      }
      local.write(Buf::kIntermediate, batch * sz);
      local.s.macs += batch * in;
    }
  });
}

}  // namespace

const char* traffic_buffer_name(TrafficBuffer b) noexcept {
  switch (b) {
    case Buf::kActivations: return "activations";
    case Buf::kCodes: return "codes";
    case Buf::kScales: return "scales";
    case Buf::kZeroPoints: return "zero_points";
    case Buf::kAdapterA: return "adapter_a";
    case Buf::kAdapterB: return "adapter_b";
    case Buf::kIntermediate: return "intermediate";
    case Buf::kDequantTemp: return "dequant_temp";
    case Buf::kOutput: return "output";
  }
  return "unknown";
}

std::uint64_t TrafficSnapshot::bytes_read() const noexcept {
  std::uint64_t n = 0;
  for (auto v : read) n += v;
  return n;
}

std::uint64_t TrafficSnapshot::bytes_written() const noexcept {
  std::uint64_t n = 0;
  for (auto v : written) n += v;
  return n;
}

void TrafficCounter::add(const TrafficSnapshot& delta) noexcept {
  for (std::size_t i = 0; i < kTrafficBufferCount; ++i) {
    if (delta.read[i]) read_[i].fetch_add(delta.read[i], std::memory_order_relaxed);
    if (delta.written[i]) written_[i].fetch_add(delta.written[i], std::memory_order_relaxed);
  }
  if (delta.kernels_launched) kernels_.fetch_add(delta.kernels_launched, std::memory_order_relaxed);
  if (delta.macs) macs_.fetch_add(delta.macs, std::memory_order_relaxed);
}

void TrafficCounter::read(TrafficBuffer b, std::uint64_t bytes) noexcept {
  read_[static_cast<std::size_t>(b)].fetch_add(bytes, std::memory_order_relaxed);
}

void TrafficCounter::write(TrafficBuffer b, std::uint64_t bytes) noexcept {
  written_[static_cast<std::size_t>(b)].fetch_add(bytes, std::memory_order_relaxed);
}

void TrafficCounter::reset() noexcept {
  for (auto& v : read_) v.store(0, std::memory_order_relaxed);
  for (auto& v : written_) v.store(0, std::memory_order_relaxed);
  kernels_.store(0, std::memory_order_relaxed);
  macs_.store(0, std::memory_order_relaxed);
}

TrafficSnapshot TrafficCounter::snapshot() const noexcept {
  TrafficSnapshot s;
  for (std::size_t i = 0; i < kTrafficBufferCount; ++i) {
    s.read[i] = read_[i].load(std::memory_order_relaxed);
    s.written[i] = written_[i].load(std::memory_order_relaxed);
  }
  s.kernels_launched = kernels_.load(std::memory_order_relaxed);
  s.macs = macs_.load(std::memory_order_relaxed);
  return s;
}

template <typename T>
void FusedLayer<T>::validate() const {
  q.validate();
  if (a.cols() != q.in_dim || b.rows() != q.out_dim || b.cols() != a.rows())
    throw ShapeError("fused layer: sub-branch shapes are inconsistent with the quantized weights");
}

template <typename T>
FusedLayer<T> make_fused_layer(QuantizedTensor q, const SubBranch& sub) {
  sub.validate(q.out_dim, q.in_dim);
  FusedLayer<T> layer{std::move(q), sub.a.template cast<T>(), sub.b.template cast<T>(), {}};
  layer.validate();
  return layer;
}

template <typename T>
Matrix<T> naive_forward(const QuantizedTensor& q, const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& x,
                        TrafficCounter& counter, const ForwardOptions& opts) {
  check_shapes(q, a, b, x);
  const std::size_t batch = x.rows();
  const std::size_t in = q.in_dim;
  const std::size_t out = q.out_dim;
  const std::size_t rank = a.rows();
  const std::size_t gs = q.config.group_size;
  const std::size_t ng = q.groups();
  constexpr std::uint64_t sz = sizeof(T);
  reset_shadow(opts, batch, out);
  std::uint32_t* shadow = opts.write_shadow ? opts.write_shadow->data() : nullptr;

  // (1) dequantize the full weight matrix.
  Matrix<T> wq(out, in);
  counter.launch();
  parallel_rows(out, opts.threads, counter, [&](std::size_t begin, std::size_t end, LocalTraffic& local) {
    for (std::size_t j = begin; j < end; ++j) {
      const std::uint8_t* row = q.code_row(j);
      local.read(Buf::kCodes, q.row_bytes());
      local.read(Buf::kScales, ng * sizeof(float));
      local.read(Buf::kZeroPoints, ng * sizeof(std::int32_t));
      for (std::size_t g = 0; g < ng; ++g) {
        const std::size_t begin_c = g * gs;
        const std::size_t len = std::min(gs, in - begin_c);
        dequantize_group(q, row, begin_c, len, static_cast<T>(q.scales[j * ng + g]), q.zero_points[j * ng + g],
                         wq.row(j).data() + begin_c);
      }
      local.write(Buf::kDequantTemp, in * sz);
    }
  });

  // (2) y = x·W'ᵀ
  Matrix<T> y(batch, out);
  counter.launch();
  counter.read(Buf::kActivations, batch * in * sz);
  parallel_rows(out, opts.threads, counter, [&](std::size_t begin, std::size_t end, LocalTraffic& local) {
    for (std::size_t j = begin; j < end; ++j) {
      const T* wj = wq.row(j).data();
      local.read(Buf::kDequantTemp, in * sz);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* xb = x.row(bi).data();
        T acc{};
        for (std::size_t c = 0; c < in; ++c) acc += xb[c] * wj[c];
        y(bi, j) = acc;
        if (shadow) ++shadow[bi * out + j];
      }
      local.write(Buf::kOutput, batch * sz);
      local.s.macs += batch * in;
    }
  });

  // (3) t = x·Aᵀ
  Matrix<T> t(batch, rank);
  down_projection(a, x, t, counter, opts.threads);

  // (4) y += t·Bᵀ
  counter.launch();
  counter.read(Buf::kIntermediate, batch * rank * sz);
  parallel_rows(out, opts.threads, counter, [&](std::size_t begin, std::size_t end, LocalTraffic& local) {
    for (std::size_t j = begin; j < end; ++j) {
      const T* bj = b.row(j).data();
      local.read(Buf::kAdapterB, rank * sz);
      local.read(Buf::kOutput, batch * sz);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* tb = t.row(bi).data();
        T up{};
        for (std::size_t k = 0; k < rank; ++k) up += tb[k] * bj[k];
        y(bi, j) = y(bi, j) + up;
        if (shadow) ++shadow[bi * out + j];
      }
      local.write(Buf::kOutput, batch * sz);
      local.s.macs += batch * rank;
    }
  });
  return y;
}

template <typename T>
Matrix<T> fused_forward(FusedLayer<T>& layer, const Matrix<T>& x, TrafficCounter& counter,
                        const ForwardOptions& opts) {
  const QuantizedTensor& q = layer.q;
  check_shapes(q, layer.a, layer.b, x);
  const std::size_t batch = x.rows();
  const std::size_t in = q.in_dim;
  const std::size_t out = q.out_dim;
  const std::size_t rank = layer.rank();
  const std::size_t gs = q.config.group_size;
  const std::size_t ng = q.groups();
  constexpr std::uint64_t sz = sizeof(T);
  reset_shadow(opts, batch, out);
  std::uint32_t* shadow = opts.write_shadow ? opts.write_shadow->data() : nullptr;

  // Kernel 1: t = x·Aᵀ into the reusable workspace.
  if (layer.workspace.rows() != batch || layer.workspace.cols() != rank) layer.workspace = Matrix<T>(batch, rank);
  Matrix<T>& t = layer.workspace;
  down_projection(layer.a, x, t, counter, opts.threads);

  // Kernel 2: one output feature per work unit, dequantizing a group at a
  // time; the up projection lands in the same accumulator before the single
  // store.
  Matrix<T> y(batch, out);
  counter.launch();
  counter.read(Buf::kActivations, batch * in * sz);
  counter.read(Buf::kIntermediate, batch * rank * sz);
  parallel_rows(out, opts.threads, counter, [&](std::size_t begin, std::size_t end, LocalTraffic& local) {
    std::vector<T> tile(std::min(gs, in));
    std::vector<T> acc(batch);
    for (std::size_t j = begin; j < end; ++j) {
      const std::uint8_t* row = q.code_row(j);
      local.read(Buf::kCodes, q.row_bytes());
      local.read(Buf::kScales, ng * sizeof(float));
      local.read(Buf::kZeroPoints, ng * sizeof(std::int32_t));
      std::fill(acc.begin(), acc.end(), T{});
      for (std::size_t g = 0; g < ng; ++g) {
        const std::size_t begin_c = g * gs;
        const std::size_t len = std::min(gs, in - begin_c);
        dequantize_group(q, row, begin_c, len, static_cast<T>(q.scales[j * ng + g]), q.zero_points[j * ng + g],
                         tile.data());
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* xb = x.row(bi).data() + begin_c;
          T s = acc[bi];
          for (std::size_t i = 0; i < len; ++i) s += xb[i] * tile[i];
          acc[bi] = s;
        }
      }
      const T* bj = layer.b.row(j).data();
      local.read(Buf::kAdapterB, rank * sz);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* tb = t.row(bi).data();
        T up{};
        for (std::size_t k = 0; k < rank; ++k) up += tb[k] * bj[k];
        y(bi, j) = acc[bi] + up;
        if (shadow) ++shadow[bi * out + j];
      }
      local.write(Buf::kOutput, batch * sz);
      local.s.macs += batch * in + batch * rank;
    }
  });
  return y;
}

template struct FusedLayer<float>;
template struct FusedLayer<double>;
template FusedLayer<float> make_fused_layer<float>(QuantizedTensor, const SubBranch&);
template FusedLayer<double> make_fused_layer<double>(QuantizedTensor, const SubBranch&);
template Matrix<float> naive_forward<float>(const QuantizedTensor&, const Matrix<float>&, const Matrix<float>&,
                                            const Matrix<float>&, TrafficCounter&, const ForwardOptions&);
template Matrix<double> naive_forward<double>(const QuantizedTensor&, const Matrix<double>&, const Matrix<double>&,
                                              const Matrix<double>&, TrafficCounter&, const ForwardOptions&);
template Matrix<float> fused_forward<float>(FusedLayer<float>&, const Matrix<float>&, TrafficCounter&,
                                            const ForwardOptions&);
template Matrix<double> fused_forward<double>(FusedLayer<double>&, const Matrix<double>&, TrafficCounter&,
                                              const ForwardOptions&);

MacsOverhead macs_overhead(const CostModelQuery& q) {
  if (q.d == 0) throw ValueError("macs_overhead: layer dimension d must be > 0");
  MacsOverhead m;
  m.m0 = q.b * q.d * q.d;
  m.m1 = 2 * q.b * q.r * q.d;
  m.ratio = 2.0 * static_cast<double>(q.r) / static_cast<double>(q.d);
  return m;
}

namespace {

std::uint64_t median(std::vector<std::uint64_t> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

}  // namespace

std::vector<BenchmarkRow> benchmark(const std::vector<CostModelQuery>& shapes, const BenchmarkOptions& opts) {
  if (opts.reps < 3) throw ValueError("benchmark: reps must be >= 3");
  std::vector<std::size_t> modes{1};
  if (opts.multi_threaded) {
    std::size_t mt = opts.mt_threads ? opts.mt_threads : std::max(2u, std::thread::hardware_concurrency());
    modes.push_back(mt);
  }
  QuantConfig qc;
  qc.bits = opts.bits;
  qc.group_size = opts.group_size;
  qc.validate();

  std::vector<BenchmarkRow> rows;
  using clock = std::chrono::steady_clock;
  for (const CostModelQuery& shape : shapes) {
    if (shape.d == 0) throw ValueError("benchmark: d must be > 0");
    const std::size_t d = shape.d;
    const std::size_t r = shape.r;
    const std::size_t b = shape.b;
    std::mt19937_64 rng(opts.seed ^ (shape.b * 0x9e37u + shape.d * 0x85ebu + shape.r));
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixD w(d, d);
    for (double& v : w.values()) v = normal(rng) * 0.02;
    SubBranch sub{MatrixD(r, d), MatrixD(d, r)};
    for (double& v : sub.a.values()) v = normal(rng) * 0.02;
    for (double& v : sub.b.values()) v = normal(rng) * 0.02;
    MatrixF x(b, d);
    for (float& v : x.values()) v = static_cast<float>(normal(rng));
    FusedLayer<float> layer = make_fused_layer<float>(quantize_rtn(w, qc), sub);
    w = MatrixD();

    for (std::size_t threads : modes) {
      ForwardOptions fo;
      fo.threads = threads;
      TrafficCounter naive_counter;
      TrafficCounter fused_counter;
      // Warmup.
      naive_forward(layer.q, layer.a, layer.b, x, naive_counter, fo);
      fused_forward(layer, x, fused_counter, fo);
      std::vector<std::uint64_t> naive_ns;
      std::vector<std::uint64_t> fused_ns;
      for (std::size_t rep = 0; rep < opts.reps; ++rep) {
        naive_counter.reset();
        auto t0 = clock::now();
        auto y0 = naive_forward(layer.q, layer.a, layer.b, x, naive_counter, fo);
        auto t1 = clock::now();
        fused_counter.reset();
        auto y1 = fused_forward(layer, x, fused_counter, fo);
        auto t2 = clock::now();
        naive_ns.push_back(static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        fused_ns.push_back(static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count()));
      }
      const std::string suffix = threads > 1 ? "_mt" : "";
      for (int v = 0; v < 2; ++v) {
        BenchmarkRow row;
        row.variant = (v == 0 ? "naive" : "fused") + suffix;
        row.threads = threads;
        row.shape = shape;
        row.bits = opts.bits;
        row.median_ns = median(v == 0 ? naive_ns : fused_ns);
        row.tokens_per_s = row.median_ns ? static_cast<double>(b) * 1e9 / static_cast<double>(row.median_ns) : 0.0;
        row.counters = v == 0 ? naive_counter.snapshot() : fused_counter.snapshot();
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::string benchmark_csv(const std::vector<BenchmarkRow>& rows) {
  std::ostringstream os;
  os << "variant,b,d,r,median_ns,bytes_read,bytes_written,kernels,macs\n";
  for (const auto& row : rows) {
    os << row.variant << ',' << row.shape.b << ',' << row.shape.d << ',' << row.shape.r << ',' << row.median_ns << ','
       << row.counters.bytes_read() << ',' << row.counters.bytes_written() << ',' << row.counters.kernels_launched
       << ',' << row.counters.macs << '\n';
  }
  return os.str();
}

std::vector<CostModelQuery> parse_shapes(const std::string& text) {
  std::vector<CostModelQuery> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "decode") {
      out.push_back({1, 4096, 128});
      continue;
    }
    if (item == "prefill") {
      out.push_back({256, 4096, 128});
      continue;
    }
    CostModelQuery q;
    char c1 = 0;
    char c2 = 0;
    std::istringstream is(item);
    if (!(is >> q.b >> c1 >> q.d >> c2 >> q.r) || c1 != ':' || c2 != ':' || !is.eof()) {
      throw ValueError("bad shape '" + item + "', expected b:d:r");
    }
    if (q.d == 0) throw ValueError("bad shape '" + item + "': d must be > 0");
    out.push_back(q);
  }
  if (out.empty()) throw ValueError("no shapes given");
  return out;
}

}  // namespace fbq
