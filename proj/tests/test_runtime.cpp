// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "fbquant/errors.hpp"
#include "fbquant/runtime.hpp"
#include "support/test_support.hpp"

namespace fbq {
namespace {

using testing::random_matrix;
using testing::to_eigen;
using Buf = TrafficBuffer;

struct Shape {
  std::size_t batch, out, in, rank, group;
  int bits;
};

// Compulsory traffic written out from the kernel descriptions.
template <typename T>
TrafficSnapshot expected_traffic(const Shape& s, bool fused) {
  const std::uint64_t sz = sizeof(T);
  const std::uint64_t groups = (s.in + s.group - 1) / s.group;
  const std::uint64_t row_bytes = (s.in * s.bits + 7) / 8;
  TrafficSnapshot t;
  auto rd = [&](Buf b, std::uint64_t n) { t.read[static_cast<std::size_t>(b)] += n; };
  auto wr = [&](Buf b, std::uint64_t n) { t.written[static_cast<std::size_t>(b)] += n; };
  rd(Buf::kCodes, s.out * row_bytes);
  rd(Buf::kScales, s.out * groups * 4);
  rd(Buf::kZeroPoints, s.out * groups * 4);
  rd(Buf::kAdapterA, s.rank * s.in * sz);
  rd(Buf::kAdapterB, s.out * s.rank * sz);
  rd(Buf::kActivations, 2 * s.batch * s.in * sz);
  wr(Buf::kIntermediate, s.batch * s.rank * sz);
  rd(Buf::kIntermediate, s.batch * s.rank * sz);
  if (fused) {
    wr(Buf::kOutput, s.batch * s.out * sz);
    t.kernels_launched = 2;
  } else {
    wr(Buf::kDequantTemp, s.out * s.in * sz);
    rd(Buf::kDequantTemp, s.out * s.in * sz);
    wr(Buf::kOutput, 2 * s.batch * s.out * sz);
    rd(Buf::kOutput, s.batch * s.out * sz);
    t.kernels_launched = 4;
  }
  t.macs = s.batch * s.out * s.in + s.batch * s.rank * s.in + s.batch * s.out * s.rank;
  return t;
}

struct Instance {
  QuantizedTensor q;
  SubBranch sub;
  MatrixD x;
};

Instance make_instance(const Shape& s, std::mt19937_64& rng) {
  QuantConfig c;
  c.bits = s.bits;
  c.group_size = s.group;
  return {quantize_rtn(random_matrix(s.out, s.in, 1.0, rng), c),
          SubBranch{random_matrix(s.rank, s.in, 0.1, rng), random_matrix(s.out, s.rank, 0.1, rng)},
          random_matrix(s.batch, s.in, 1.0, rng)};
}

Shape random_shape(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> batch(1, 6), dim(1, 70), rank(0, 9), group(1, 40);
  const int bits = std::array{2, 3, 4, 8}[rng() % 4];
  return {batch(rng), dim(rng), dim(rng), rank(rng), group(rng), bits};
}

TEST(Forward, MatchesDenseReference) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s = random_shape(rng);
    const Instance inst = make_instance(s, rng);
    TrafficCounter c;
    const MatrixD y = naive_forward<double>(inst.q, inst.sub.a, inst.sub.b, inst.x, c);
    const Eigen::MatrixXd w = to_eigen(dequantize(inst.q)) + to_eigen(inst.sub.b) * to_eigen(inst.sub.a);
    const Eigen::MatrixXd ref = to_eigen(inst.x) * w.transpose();
    EXPECT_LE((to_eigen(y) - ref).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
  }
}

TEST(Forward, FusedEqualsNaiveAndTrafficMatchesModel) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Shape s = random_shape(rng);
    const Instance inst = make_instance(s, rng);
    FusedLayer<float> layer = make_fused_layer<float>(inst.q, inst.sub);
    const MatrixF x = inst.x.cast<float>();
    TrafficCounter naive_c, fused_c;
    const MatrixF yn = naive_forward<float>(inst.q, layer.a, layer.b, x, naive_c);
    const MatrixF yf = fused_forward<float>(layer, x, fused_c);
    EXPECT_TRUE(yn == yf) << "trial " << trial;
    EXPECT_EQ(naive_c.snapshot(), expected_traffic<float>(s, false)) << "trial " << trial;
    EXPECT_EQ(fused_c.snapshot(), expected_traffic<float>(s, true)) << "trial " << trial;
  }
}

TEST(Forward, DoubleTrafficUsesEightByteElements) {
  std::mt19937_64 rng(3);
  const Shape s{3, 17, 29, 4, 8, 3};
  const Instance inst = make_instance(s, rng);
  FusedLayer<double> layer = make_fused_layer<double>(inst.q, inst.sub);
  TrafficCounter nc, fc;
  naive_forward<double>(inst.q, layer.a, layer.b, inst.x, nc);
  fused_forward<double>(layer, inst.x, fc);
  EXPECT_EQ(nc.snapshot(), expected_traffic<double>(s, false));
  EXPECT_EQ(fc.snapshot(), expected_traffic<double>(s, true));
}

TEST(Forward, FusedWritesEachOutputOnce) {
  std::mt19937_64 rng(4);
  const Shape s{4, 33, 40, 5, 16, 4};
  const Instance inst = make_instance(s, rng);
  FusedLayer<float> layer = make_fused_layer<float>(inst.q, inst.sub);
  const MatrixF x = inst.x.cast<float>();
  std::vector<std::uint32_t> naive_shadow, fused_shadow;
  TrafficCounter c;
  naive_forward<float>(inst.q, layer.a, layer.b, x, c, {1, &naive_shadow});
  fused_forward<float>(layer, x, c, {1, &fused_shadow});
  ASSERT_EQ(naive_shadow.size(), 4u * 33u);
  for (auto v : naive_shadow) EXPECT_EQ(v, 2u);
  for (auto v : fused_shadow) EXPECT_EQ(v, 1u);
}

TEST(Forward, ThreadedRunsMatchSerial) {
  std::mt19937_64 rng(5);
  const Shape s{3, 61, 50, 6, 7, 3};
  const Instance inst = make_instance(s, rng);
  FusedLayer<float> layer = make_fused_layer<float>(inst.q, inst.sub);
  const MatrixF x = inst.x.cast<float>();
  TrafficCounter serial_n, serial_f;
  const MatrixF yn = naive_forward<float>(inst.q, layer.a, layer.b, x, serial_n);
  const MatrixF yf = fused_forward<float>(layer, x, serial_f);
  for (std::size_t threads : {2u, 3u, 8u, 100u}) {
    TrafficCounter nc, fc;
    EXPECT_TRUE(naive_forward<float>(inst.q, layer.a, layer.b, x, nc, {threads, nullptr}) == yn);
    EXPECT_TRUE(fused_forward<float>(layer, x, fc, {threads, nullptr}) == yf);
    EXPECT_EQ(nc.snapshot(), serial_n.snapshot());
    EXPECT_EQ(fc.snapshot(), serial_f.snapshot());
  }
}

TEST(Forward, CounterAccumulatesAcrossCallsAndResets) {
  std::mt19937_64 rng(6);
  const Shape s{1, 8, 8, 2, 4, 4};
  const Instance inst = make_instance(s, rng);
  FusedLayer<float> layer = make_fused_layer<float>(inst.q, inst.sub);
  const MatrixF x = inst.x.cast<float>();
  TrafficCounter c;
  fused_forward<float>(layer, x, c);
  fused_forward<float>(layer, x, c);
  EXPECT_EQ(c.kernels_launched(), 4u);
  EXPECT_EQ(c.bytes_written(), 2 * expected_traffic<float>(s, true).bytes_written());
  c.reset();
  EXPECT_EQ(c.snapshot(), TrafficSnapshot{});
}

TEST(Forward, ShapeErrors) {
  std::mt19937_64 rng(7);
  const Instance inst = make_instance({1, 4, 6, 2, 3, 4}, rng);
  TrafficCounter c;
  EXPECT_THROW(naive_forward<double>(inst.q, inst.sub.a, inst.sub.b, MatrixD(1, 5), c), ShapeError);
  EXPECT_THROW(make_fused_layer<float>(inst.q, SubBranch{MatrixD(2, 6), MatrixD(5, 2)}), ShapeError);
}

TEST(CostModel, DecodeShapeRatio) {
  const MacsOverhead m = macs_overhead({1, 4096, 128});
  EXPECT_EQ(m.m0, 4096ull * 4096ull);
  EXPECT_EQ(m.m1, 2ull * 128ull * 4096ull);
  EXPECT_EQ(m.ratio, 0.0625);
}

TEST(CostModel, RatioIsIndependentOfBatch) {
  for (std::uint64_t b : {1u, 7u, 256u}) {
    for (std::uint64_t d : {64u, 1000u, 8192u}) {
      for (std::uint64_t r : {0u, 8u, 128u}) {
        const MacsOverhead m = macs_overhead({b, d, r});
        EXPECT_DOUBLE_EQ(m.ratio, 2.0 * static_cast<double>(r) / static_cast<double>(d));
      }
    }
  }
  EXPECT_THROW(macs_overhead({1, 0, 1}), ValueError);
}

TEST(Shapes, ParsesTriplesAndAliases) {
  const auto shapes = parse_shapes("decode,prefill,2:64:8");
  ASSERT_EQ(shapes.size(), 3u);
  EXPECT_EQ(shapes[0].b, 1u);
  EXPECT_EQ(shapes[0].d, 4096u);
  EXPECT_EQ(shapes[0].r, 128u);
  EXPECT_EQ(shapes[1].b, 256u);
  EXPECT_EQ(shapes[2].b, 2u);
  EXPECT_EQ(shapes[2].d, 64u);
  EXPECT_EQ(shapes[2].r, 8u);
  EXPECT_THROW(parse_shapes("1:2"), ValueError);
  EXPECT_THROW(parse_shapes("1:0:4"), ValueError);
  EXPECT_THROW(parse_shapes(""), ValueError);
  EXPECT_THROW(parse_shapes("a:b:c"), ValueError);
}

TEST(Benchmark, ReportsAllVariants) {
  BenchmarkOptions o;
  o.reps = 3;
  o.mt_threads = 2;
  const auto rows = benchmark(parse_shapes("2:64:8"), o);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].variant, "naive");
  EXPECT_EQ(rows[1].variant, "fused");
  EXPECT_EQ(rows[2].variant, "naive_mt");
  EXPECT_EQ(rows[3].variant, "fused_mt");
  EXPECT_EQ(rows[0].counters.kernels_launched, 4u);
  EXPECT_EQ(rows[1].counters.kernels_launched, 2u);
  EXPECT_EQ(rows[0].counters, rows[2].counters);
  EXPECT_EQ(rows[1].counters, rows[3].counters);
  const Shape s{2, 64, 64, 8, 64, 4};
  EXPECT_EQ(rows[1].counters, expected_traffic<float>(s, true));
  const std::string csv = benchmark_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,b,d,r,median_ns,bytes_read,bytes_written,kernels,macs");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  o.reps = 2;
  EXPECT_THROW(benchmark(parse_shapes("1:8:2"), o), ValueError);
}

}  // namespace
}  // namespace fbq
