// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// When calibration inputs span fewer directions than the layer width, XᵀX is
// singular and a conventional sub-branch Σ* can be moved along its null space
// without changing the calibration loss. Those moves drag the reconstructed
// weights W_Q + Σ arbitrarily far from W, while the feedback reconstruction of
// the same Σ stays within half a quantization step.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fbquant/fbcore.hpp"

namespace fbq {

struct IllposedScenario {
  LayerRecord layer;  // n_samples < in_dim
  MatrixD sigma_star;
  std::size_t rank = 1;
  std::vector<double> alphas{0.0, 1.0, 10.0, 100.0};
  double tol = 1e-8;
  double null_tol = kDefaultNullTol;
};

struct IllposedPoint {
  double alpha = 0.0;
  // |L1(Σ') − L1(Σ*)| / L1(Σ*), or absolute when L1(Σ*) == 0.
  double loss_delta = 0.0;
  double max_deviation_conventional = 0.0;
  double max_deviation_fbquant = 0.0;
  // Half of the largest group scale of Q(W − Σ'): the feedback bound.
  double bound_s_half = 0.0;
  // Half of the largest group scale of Q(W): the plain RTN step.
  double rtn_s_half = 0.0;
  std::size_t fbquant_bound_violations = 0;
};

struct IllposedReport {
  std::string layer;
  std::size_t null_dim = 0;
  double sigma_star_loss = 0.0;
  std::vector<IllposedPoint> points;

  bool loss_invariant(double tol) const;
  bool conventional_strictly_increasing() const;
  bool fbquant_bounded() const;
};

/// Σ_N = U_r·diag(S_r)·(α·N_r) where U_r, S_r come from the top-`rank` SVD of
/// Σ* and the rows of N_r lie in the null space of XᵀX. Throws
/// PreconditionError when XᵀX has no null space.
MatrixD build_perturbation(const MatrixD& sigma_star, const MatrixD& x, std::size_t rank, double alpha,
                           double null_tol = kDefaultNullTol);

/// The null-space rows used for N_r: the first `rank` basis rows, cycled when
/// the basis is smaller and then re-orthonormalized.
MatrixD null_directions(const MatrixD& x, std::size_t rank, double null_tol = kDefaultNullTol);

IllposedReport run_illposed_demo(const IllposedScenario& scenario, const QuantConfig& qconfig);

/// Builds a scenario whose Σ* is the direct-gradient-descent baseline.
IllposedScenario make_scenario(const LayerRecord& layer, const QuantConfig& qconfig,
                               const OptimizerSettings& settings, std::vector<double> alphas);

}  // namespace fbq
