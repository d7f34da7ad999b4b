// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fbquant/fbcore.hpp"

namespace fbq {

namespace {

MatrixD random_matrix(std::size_t r, std::size_t c, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  MatrixD m(r, c);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t probes, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= probes) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(probes);
  return idx;
}

// Central differences of `loss` at the entries `idx` of `param`.
template <typename Loss>
double rel_error(MatrixD& param, const MatrixD& analytic, const std::vector<std::size_t>& idx, double h,
                 const Loss& loss) {
  double max_err = 0.0;
  double max_fd = 0.0;
  for (std::size_t i : idx) {
    double& p = param.values()[i];
    const double saved = p;
    p = saved + h;
    const double up = loss();
    p = saved - h;
    const double down = loss();
    p = saved;
    const double fd = (up - down) / (2.0 * h);
    max_err = std::max(max_err, std::abs(analytic.values()[i] - fd));
    max_fd = std::max(max_fd, std::abs(fd));
  }
  if (max_fd == 0.0) return max_err;
  return max_err / max_fd;
}

}  // namespace

double GradcheckSummary::max_rel() const noexcept { return std::max({max_rel_sigma, max_rel_a, max_rel_b}); }

GradcheckSummary run_gradcheck(std::uint64_t seed, const GradcheckOptions& opts) {
  GradcheckSummary summary;
  std::mt19937_64 rng(seed);
  const std::size_t lo = std::min<std::size_t>(2, opts.max_dim);
  std::uniform_int_distribution<std::size_t> dim(lo, opts.max_dim);
  std::uniform_int_distribution<int> bits_pick(0, 3);
  const int bit_choices[] = {2, 3, 4, 8};

  for (std::size_t inst = 0; inst < opts.instances; ++inst) {
    const std::size_t out = dim(rng);
    const std::size_t in = dim(rng);
    const std::size_t n = dim(rng);
    const std::size_t rank = opts.rank;
    QuantConfig qc;
    qc.bits = bit_choices[bits_pick(rng)];
    qc.group_size = std::max<std::size_t>(1, in / 2);

    const MatrixD w = random_matrix(out, in, 1.0, rng);
    const MatrixD x = random_matrix(n, in, 1.0, rng);
    SubBranch sub{random_matrix(rank, in, 0.1, rng), random_matrix(out, rank, 0.1, rng)};
    const MatrixD g = gram(x);

    // Freeze the quantized term at the current Σ.
    const FeedbackResult fb = fb_reconstruct(w, sub, qc);
    const MatrixD frozen = dequantize(fb.q);
    const MatrixD delta = w - fb.w_f;

    const MatrixD gs = grad_sigma(delta, g);
    const FactorGrads gf = grad_ab(gs, sub);

    const MatrixD undetached = grad_sigma_chain(delta, g, false);
    for (double v : undetached.values())
      if (v != 0.0) summary.ste_all_zero = false;

    MatrixD sigma = sub.sigma();
    auto loss_sigma = [&] { return reconstruction_loss(w, frozen + sigma, x); };
    auto loss_factors = [&] { return reconstruction_loss(w, frozen + matmul(sub.b, sub.a), x); };

    summary.max_rel_sigma = std::max(
        summary.max_rel_sigma, rel_error(sigma, gs, probe_indices(sigma.size(), opts.probes, rng), opts.step, loss_sigma));
    summary.max_rel_a = std::max(
        summary.max_rel_a, rel_error(sub.a, gf.a, probe_indices(sub.a.size(), opts.probes, rng), opts.step, loss_factors));
    summary.max_rel_b = std::max(
        summary.max_rel_b, rel_error(sub.b, gf.b, probe_indices(sub.b.size(), opts.probes, rng), opts.step, loss_factors));
    ++summary.instances;
  }
  return summary;
}

}  // namespace fbq
