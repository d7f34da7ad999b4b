// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/illposed.hpp"

#include <algorithm>
#include <cmath>

namespace fbq {

namespace {

double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

bool IllposedReport::loss_invariant(double tol) const {
  return std::all_of(points.begin(), points.end(), [&](const IllposedPoint& p) { return p.loss_delta <= tol; });
}

bool IllposedReport::conventional_strictly_increasing() const {
  for (std::size_t i = 1; i < points.size(); ++i)
    if (!(points[i].max_deviation_conventional > points[i - 1].max_deviation_conventional)) return false;
  return true;
}

bool IllposedReport::fbquant_bounded() const {
  return std::all_of(points.begin(), points.end(), [](const IllposedPoint& p) {
    return p.fbquant_bound_violations == 0 && p.max_deviation_fbquant <= p.bound_s_half;
  });
}

MatrixD null_directions(const MatrixD& x, std::size_t rank, double null_tol) {
  const MatrixD basis = gram_null_basis(x, null_tol);
  if (basis.rows() == 0) {
    throw PreconditionError("calibration is full rank; ill-posedness premise fails");
  }
  MatrixD picked(rank, x.cols());
  for (std::size_t i = 0; i < rank; ++i) {
    const auto src = basis.row(i % basis.rows());
    std::copy(src.begin(), src.end(), picked.row(i).begin());
  }
  return orthonormalize_rows(picked);
}

MatrixD build_perturbation(const MatrixD& sigma_star, const MatrixD& x, std::size_t rank, double alpha,
                           double null_tol) {
  if (sigma_star.cols() != x.cols()) throw ShapeError("build_perturbation: Σ* and calibration widths differ");
  if (rank > std::min(sigma_star.rows(), sigma_star.cols()))
    throw ValueError("build_perturbation: rank exceeds the dimensions of Σ*");
  const MatrixD n_r = null_directions(x, rank, null_tol);
  const SvdResult svd = truncated_svd(sigma_star, rank);
  MatrixD us = svd.u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t j = 0; j < rank; ++j) us(r, j) *= svd.s[j];
  return matmul(us, alpha * n_r);
}

IllposedReport run_illposed_demo(const IllposedScenario& scenario, const QuantConfig& qconfig) {
  const LayerRecord& layer = scenario.layer;
  layer.validate();
  detail::require_same_shape(layer.w, scenario.sigma_star, "run_illposed_demo");

  const MatrixD g = gram(layer.x);
  const QuantizedTensor q_rtn = quantize_rtn(layer.w, qconfig);
  const MatrixD w_q = dequantize(q_rtn);
  const MatrixD delta = layer.w - w_q;

  IllposedReport report;
  report.layer = layer.name;
  report.null_dim = gram_null_basis(layer.x, scenario.null_tol).rows();
  report.sigma_star_loss = trace_loss(delta - scenario.sigma_star, g);

  // The perturbation is linear in α, so build it once at α = 1.
  const MatrixD unit = build_perturbation(scenario.sigma_star, layer.x, scenario.rank, 1.0, scenario.null_tol);
  for (double alpha : scenario.alphas) {
    const MatrixD sigma_prime = scenario.sigma_star + alpha * unit;
    IllposedPoint p;
    p.alpha = alpha;
    const double loss = trace_loss(delta - sigma_prime, g);
    const double diff = std::abs(loss - report.sigma_star_loss);
    p.loss_delta = report.sigma_star_loss > 0.0 ? diff / report.sigma_star_loss : diff;
    p.max_deviation_conventional = max_abs_diff(layer.w, w_q + sigma_prime);
    const FeedbackResult fb = fb_reconstruct(layer.w, sigma_prime, qconfig);
    p.max_deviation_fbquant = max_abs_diff(layer.w, fb.w_f);
    p.bound_s_half = fb.q.max_half_scale();
    p.rtn_s_half = q_rtn.max_half_scale();
    p.fbquant_bound_violations = count_bound_violations(layer.w, fb.w_f, fb.q);
    report.points.push_back(p);
  }
  return report;
}

IllposedScenario make_scenario(const LayerRecord& layer, const QuantConfig& qconfig,
                               const OptimizerSettings& settings, std::vector<double> alphas) {
  const std::size_t rank = std::min({settings.rank, layer.w.rows(), layer.w.cols()});
  LayerResult base = baseline_subbranch(layer, qconfig, rank, BaselineMethod::kDirectGd, settings);
  IllposedScenario s;
  s.layer = layer;
  s.sigma_star = base.sub.sigma();
  s.rank = rank;
  s.alphas = std::move(alphas);
  return s;
}

}  // namespace fbq
