// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one [PASS]/[FAIL] line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <string>

#include "fbquant/fbcore.hpp"
#include "fbquant/gradcheck.hpp"
#include "fbquant/illposed.hpp"
#include "fbquant/io.hpp"
#include "fbquant/runtime.hpp"

namespace {

using namespace fbq;
using clock_type = std::chrono::steady_clock;

MatrixD normal(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, scale);
  MatrixD m(rows, cols);
  for (double& v : m.values()) v = d(rng);
  return m;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(int id, const char* title, double limit_s, const std::function<Outcome()>& fn) {
  const auto t0 = clock_type::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  if (limit_s > 0 && secs > limit_s) {
    o.pass = false;
    o.detail += "; over the time limit";
  }
  if (!o.pass) ++failures;
  std::printf("[%s] criterion %d: %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

Outcome feedback_bound() {
  std::mt19937_64 rng(101);
  const int bits[] = {2, 3, 4, 8};
  const std::size_t groups[] = {8, 32, 128};
  std::uniform_int_distribution<std::size_t> rows(1, 48), cols(1, 300);
  std::uniform_real_distribution<double> scale(1e-3, 10.0);
  std::size_t entries = 0, f64_viol = 0, f32_viol = 0, f32_strict = 0;
  const int instances = 10000;
  for (int i = 0; i < instances; ++i) {
    QuantConfig qc;
    qc.bits = bits[i % 4];
    qc.group_size = groups[(i / 4) % 3];
    const std::size_t r = rows(rng), c = cols(rng);
    const MatrixD w = normal(r, c, scale(rng), rng);
    const MatrixD sigma = normal(r, c, scale(rng), rng);
    const FeedbackResult fb = fb_reconstruct(w, sigma, qc);
    for (std::size_t a = 0; a < r; ++a) {
      for (std::size_t b = 0; b < c; ++b) {
        const double half = static_cast<double>(fb.q.scale(a, b)) / 2.0;
        if (std::abs(w(a, b) - fb.w_f(a, b)) > half) ++f64_viol;
      }
    }
    // f32 path: inputs rounded to f32, reconstruction carried out in f32.
    const MatrixD w32 = w.cast<float>().cast<double>();
    const MatrixD s32 = sigma.cast<float>().cast<double>();
    const QuantizedTensor q = quantize_rtn(w32 - s32, qc);
    for (std::size_t a = 0; a < r; ++a) {
      for (std::size_t b = 0; b < c; ++b) {
        const float s = q.scale(a, b);
        const float deq = (static_cast<float>(q.code(a, b)) - static_cast<float>(q.zero_point(a, b))) * s;
        const float wf = deq + static_cast<float>(s32(a, b));
        const float err = std::abs(static_cast<float>(w32(a, b)) - wf);
        // Two f32 roundings (product, sum) each add up to eps/2 relative to |w|.
        const float rounding = 2.0f * std::numeric_limits<float>::epsilon() * std::abs(static_cast<float>(w32(a, b)));
        if (err > s / 2.0f + 1e-6f) ++f32_strict;
        if (err > s / 2.0f + 1e-6f + rounding) ++f32_viol;
      }
    }
    entries += r * c;
  }
  return {f64_viol == 0 && f32_viol == 0,
          format("%d instances, %zu entries, f64 violations %zu, f32 violations %zu "
                 "(%zu over s/2 + 1e-6 before allowing for f32 rounding of the reconstruction)",
                 instances, entries, f64_viol, f32_viol, f32_strict)};
}

GradcheckSummary gradcheck_summary;

Outcome gradients() {
  gradcheck_summary = run_gradcheck(2026);
  const double rel = gradcheck_summary.max_rel();
  return {gradcheck_summary.instances == 100 && rel <= 1e-6,
          format("%zu instances, max relative error %.3e (sigma %.3e, A %.3e, B %.3e), tol 1e-6",
                 gradcheck_summary.instances, rel, gradcheck_summary.max_rel_sigma, gradcheck_summary.max_rel_a,
                 gradcheck_summary.max_rel_b)};
}

Outcome ste_zero() {
  return {gradcheck_summary.instances == 100 && gradcheck_summary.ste_all_zero,
          format("undetached gradient exactly zero on %s of %zu instances",
                 gradcheck_summary.ste_all_zero ? "all" : "not all", gradcheck_summary.instances)};
}

Outcome improvement() {
  std::size_t le = 0, lt = 0, monotone = 0;
  const std::size_t runs = 100;
  for (std::size_t s = 0; s < runs; ++s) {
    std::mt19937_64 rng(s);
    const LayerRecord layer{"l", normal(64, 64, 1.0, rng), normal(256, 64, 1.0, rng)};
    QuantConfig qc;
    qc.bits = 4;
    qc.group_size = 32;
    OptimizerSettings st;
    st.rank = 8;
    st.epochs = 20;
    st.seed = s;
    st.step_rule = StepRule::kBacktracking;
    const auto r = optimize_layer(layer, qc, st).report;
    const auto& l = r.loss_per_epoch;
    le += r.final_loss <= l.front();
    lt += r.final_loss < l.front();
    monotone += std::is_sorted(l.rbegin(), l.rend());
  }
  return {le == runs && lt * 100 >= 95 * runs && monotone == runs,
          format("final <= RTN on %zu/%zu, strictly lower on %zu/%zu, non-increasing curves %zu/%zu", le, runs, lt,
                 runs, monotone, runs)};
}

Outcome illposedness() {
  std::size_t invariant = 0, conventional = 0, bounded = 0;
  const std::size_t scenarios = 20;
  for (std::size_t s = 0; s < scenarios; ++s) {
    std::mt19937_64 rng(500 + s);
    const LayerRecord layer{"l", normal(64, 64, 1.0, rng), normal(16, 64, 1.0, rng)};
    QuantConfig qc;
    qc.bits = 4;
    qc.group_size = 32;
    OptimizerSettings st;
    st.rank = 8;
    st.seed = s;
    st.step_rule = StepRule::kBacktracking;
    const IllposedReport r = run_illposed_demo(make_scenario(layer, qc, st, {1.0, 10.0, 100.0}), qc);
    invariant += r.loss_invariant(1e-8);
    const IllposedPoint& at100 = r.points.back();
    conventional += at100.alpha == 100.0 && at100.max_deviation_conventional > at100.rtn_s_half;
    bounded += r.fbquant_bounded();
  }
  return {invariant == scenarios && conventional == scenarios && bounded == scenarios,
          format("loss invariant %zu/%zu, conventional deviation > s/2 at alpha 100 %zu/%zu, feedback bounded %zu/%zu",
                 invariant, scenarios, conventional, scenarios, bounded, scenarios)};
}

struct Contrast {
  double fbquant = 0.0;
  double direct_gd = 0.0;
};

// Mean held-out relative output error over 50 seeded layers with d/4
// calibration samples. `mix` draws rows as z·M for a random mixing M.
Contrast overfitting_contrast(bool mix) {
  const std::size_t d = 64;
  const std::size_t layers = 50;
  Contrast c;
  for (std::size_t s = 0; s < layers; ++s) {
    std::mt19937_64 rng(1000 + s);
    const MatrixD m = normal(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    auto draw = [&](std::size_t n) {
      const MatrixD z = normal(n, d, 1.0, rng);
      return mix ? matmul(z, m) : z;
    };
    const LayerRecord layer{"l", normal(d, d, 1.0, rng), draw(d / 4)};
    const MatrixD x_test = draw(4 * d);
    QuantConfig qc;
    qc.bits = 4;
    qc.group_size = 32;
    OptimizerSettings st;
    st.rank = 8;
    st.epochs = 20;
    st.seed = s;
    st.step_rule = StepRule::kBacktracking;
    const double ref = frobenius_sq(matmul_nt(layer.w, x_test));
    auto err = [&](const LayerResult& r) {
      return std::sqrt(output_error_sq(layer.w, reconstructed_weights(r.q, r.sub), x_test) / ref);
    };
    c.fbquant += err(optimize_layer(layer, qc, st));
    c.direct_gd += err(baseline_subbranch(layer, qc, st.rank, BaselineMethod::kDirectGd, st));
  }
  c.fbquant /= static_cast<double>(layers);
  c.direct_gd /= static_cast<double>(layers);
  return c;
}

Outcome overfitting() {
  const Contrast iso = overfitting_contrast(false);
  const Contrast mixed = overfitting_contrast(true);
  return {iso.fbquant <= iso.direct_gd,
          format("isotropic features: mean held-out error fbquant %.5f vs direct_gd %.5f; "
                 "mixed features (informational): fbquant %.5f vs direct_gd %.5f",
                 iso.fbquant, iso.direct_gd, mixed.fbquant, mixed.direct_gd)};
}

Outcome macs() {
  const MacsOverhead m = macs_overhead({1, 4096, 128});
  return {m.ratio == 0.0625, format("ratio %.17g (m0 %llu, m1 %llu)", m.ratio, static_cast<unsigned long long>(m.m0),
                                    static_cast<unsigned long long>(m.m1))};
}

// Traffic both paths must generate for f32 activations.
TrafficSnapshot traffic_model(std::size_t b, std::size_t out, std::size_t in, std::size_t r, const QuantConfig& qc,
                              bool fused) {
  const std::uint64_t groups = out * ((in + qc.group_size - 1) / qc.group_size);
  TrafficSnapshot t;
  auto rd = [&](TrafficBuffer k, std::uint64_t n) { t.read[static_cast<std::size_t>(k)] += n; };
  auto wr = [&](TrafficBuffer k, std::uint64_t n) { t.written[static_cast<std::size_t>(k)] += n; };
  rd(TrafficBuffer::kCodes, out * ((in * static_cast<std::uint64_t>(qc.bits) + 7) / 8));
  rd(TrafficBuffer::kScales, 4 * groups);
  rd(TrafficBuffer::kZeroPoints, 4 * groups);
  rd(TrafficBuffer::kAdapterA, 4 * r * in);
  rd(TrafficBuffer::kAdapterB, 4 * out * r);
  rd(TrafficBuffer::kActivations, 2 * 4 * b * in);
  wr(TrafficBuffer::kIntermediate, 4 * b * r);
  rd(TrafficBuffer::kIntermediate, 4 * b * r);
  wr(TrafficBuffer::kOutput, (fused ? 1 : 2) * 4 * b * out);
  if (!fused) {
    rd(TrafficBuffer::kOutput, 4 * b * out);
    wr(TrafficBuffer::kDequantTemp, 4 * out * in);
    rd(TrafficBuffer::kDequantTemp, 4 * out * in);
  }
  t.kernels_launched = fused ? 2 : 4;
  t.macs = b * out * in + b * r * in + b * out * r;
  return t;
}

Outcome fusion() {
  std::mt19937_64 rng(88);
  const int bits[] = {2, 3, 4, 8};
  std::uniform_int_distribution<std::size_t> batch(1, 8), dim(1, 160), rank(0, 16), group(1, 128);
  std::size_t equal = 0, traffic = 0, kernels = 0, halves = 0, temps = 0;
  double worst = 0.0;
  const std::size_t shapes = 1000;
  for (std::size_t i = 0; i < shapes; ++i) {
    const std::size_t b = batch(rng), out = dim(rng), in = dim(rng), r = rank(rng);
    QuantConfig qc;
    qc.bits = bits[i % 4];
    qc.group_size = group(rng);
    const SubBranch sub{normal(r, in, 0.05, rng), normal(out, r, 0.05, rng)};
    FusedLayer<float> layer = make_fused_layer<float>(quantize_rtn(normal(out, in, 1.0, rng), qc), sub);
    const MatrixF x = normal(b, in, 1.0, rng).cast<float>();
    TrafficCounter nc, fc;
    const MatrixF yn = naive_forward<float>(layer.q, layer.a, layer.b, x, nc);
    const MatrixF yf = fused_forward<float>(layer, x, fc);
    double diff = 0.0, mag = 0.0;
    for (std::size_t k = 0; k < yn.size(); ++k) {
      diff = std::max(diff, static_cast<double>(std::abs(yn.values()[k] - yf.values()[k])));
      mag = std::max(mag, static_cast<double>(std::abs(yn.values()[k])));
    }
    const double rel = mag > 0 ? diff / mag : diff;
    worst = std::max(worst, rel);
    equal += rel <= 1e-5;
    const TrafficSnapshot n = nc.snapshot(), f = fc.snapshot();
    traffic += n == traffic_model(b, out, in, r, qc, false) && f == traffic_model(b, out, in, r, qc, true);
    kernels += n.kernels_launched == 4 && f.kernels_launched == 2;
    const auto out_idx = static_cast<std::size_t>(TrafficBuffer::kOutput);
    halves += 2 * f.written[out_idx] == n.written[out_idx];
    const auto tmp = static_cast<std::size_t>(TrafficBuffer::kDequantTemp);
    temps += f.written[tmp] == 0 && n.written[tmp] == 4 * out * in;
  }
  const bool ok = equal == shapes && traffic == shapes && kernels == shapes && halves == shapes && temps == shapes;
  return {ok, format("%zu shapes: outputs within 1e-5 %zu (worst %.2e), counters equal model %zu, kernels 2 vs 4 %zu, "
                     "output writes halved %zu, zero temp bytes %zu",
                     shapes, equal, worst, traffic, kernels, halves, temps)};
}

Outcome speedup() {
  BenchmarkOptions o;
  o.reps = 30;
  o.bits = 4;
  o.multi_threaded = false;
  const auto rows = benchmark({{1, 4096, 128}}, o);
  const BenchmarkRow& naive = rows.at(0);
  const BenchmarkRow& fused = rows.at(1);
  const double ratio = static_cast<double>(fused.median_ns) / static_cast<double>(naive.median_ns);
  return {fused.median_ns <= naive.median_ns,
          format("decode shape, 30 reps: naive median %.3f ms, fused median %.3f ms, fused/naive %.3f",
                 naive.median_ns / 1e6, fused.median_ns / 1e6, ratio)};
}

Outcome round_trip() {
  std::mt19937_64 rng(7);
  QuantConfig qc;
  qc.bits = 3;
  qc.group_size = 32;
  OptimizerSettings st;
  st.rank = 4;
  st.epochs = 3;
  std::vector<LayerRecord> layers;
  for (const char* n : {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"})
    layers.push_back({n, normal(24, 80, 1.0, rng), normal(10, 80, 1.0, rng)});
  const auto results = quantize_model(layers, qc, st, Method::kFbquant, 1);
  const auto bytes = encode_fbq(results);
  const FbqModel model = decode_fbq(bytes);
  std::vector<LayerResult> again;
  bool fields = model.layers.size() == results.size();
  for (std::size_t i = 0; fields && i < results.size(); ++i) {
    const FbqLayer& l = model.layers[i];
    fields = l.name == results[i].name && l.q == results[i].q &&
             l.sub.a == results[i].sub.a.cast<float>().cast<double>() &&
             l.sub.b == results[i].sub.b.cast<float>().cast<double>();
    again.push_back({l.name, l.q, l.sub, {}});
  }
  const bool fbq_ok = fields && encode_fbq(again) == bytes;

  bool bundle_ok = true;
  for (TensorDtype dt : {TensorDtype::kF64, TensorDtype::kF32}) {
    const auto enc = encode_bundle(layers, dt);
    const auto parsed = parse_bundle(enc);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const MatrixD w = dt == TensorDtype::kF64 ? layers[i].w : layers[i].w.cast<float>().cast<double>();
      const MatrixD x = dt == TensorDtype::kF64 ? layers[i].x : layers[i].x.cast<float>().cast<double>();
      bundle_ok = bundle_ok && parsed[i].name == layers[i].name && parsed[i].w == w && parsed[i].x == x;
    }
    bundle_ok = bundle_ok && encode_bundle(parsed, dt) == enc;
  }

  bool sizes_ok = true;
  for (std::size_t in : {1u, 7u, 8u, 80u, 127u, 4096u, 11008u}) {
    const std::size_t rows = 3;
    QuantConfig c3;
    c3.bits = 3;
    c3.group_size = 128;
    const QuantizedTensor q = quantize_rtn(normal(rows, in, 1.0, rng), c3);
    sizes_ok = sizes_ok && q.codes.size() == rows * ((3 * in + 7) / 8) &&
               decode_fbq(encode_fbq({LayerResult{"t", q, SubBranch{MatrixD(0, in), MatrixD(rows, 0)}, {}}}))
                       .layers[0]
                       .q.codes.size() == rows * ((3 * in + 7) / 8);
  }
  sizes_ok = sizes_ok && packed_row_bytes(4096, 3) == 1536;
  return {fbq_ok && bundle_ok && sizes_ok,
          format("FBQ1 bit-exact %s, bundle f64/f32 bit-exact %s, 3-bit sizes %s (4096 columns -> 1536 bytes/row)",
                 fbq_ok ? "yes" : "no", bundle_ok ? "yes" : "no", sizes_ok ? "match" : "mismatch")};
}

}  // namespace

int main() {
  run(1, "feedback bound |w - w_F| <= s/2", 60, feedback_bound);
  run(2, "detached gradients match finite differences", 60, gradients);
  run(3, "undetached STE gradient is exactly zero", 0, ste_zero);
  run(4, "layer-wise reconstruction improves on RTN", 300, improvement);
  run(5, "null-space perturbation is invisible to the loss but not to FBQuant's bound", 60, illposedness);
  run(6, "held-out error of FBQuant <= direct_gd", 600, overfitting);
  run(7, "MACs overhead ratio at b=1, d=4096, r=128", 0, macs);
  run(8, "fused kernel equivalence and traffic counters", 0, fusion);
  run(9, "fused decode is not slower than naive", 0, speedup);
  run(10, "container round trips and 3-bit packing", 0, round_trip);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
