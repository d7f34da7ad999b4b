// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

namespace fbq {

struct GradcheckOptions {
  std::size_t instances = 100;
  std::size_t max_dim = 64;
  std::size_t rank = 8;
  double step = 1e-5;
  // Coordinates probed per gradient matrix; every entry when the matrix is
  // smaller.
  std::size_t probes = 48;
};

/// Relative error is max|analytic − fd| / max|fd| over the probed entries.
struct GradcheckSummary {
  std::size_t instances = 0;
  double max_rel_sigma = 0.0;
  double max_rel_a = 0.0;
  double max_rel_b = 0.0;
  // Every undetached chain-rule gradient was exactly zero.
  bool ste_all_zero = true;

  double max_rel() const noexcept;
};

/// Central finite differences of the feedback loss with Q(W − Σ) frozen,
/// compared against the detached closed-form gradients w.r.t. Σ, A and B on
/// seeded random layers.
GradcheckSummary run_gradcheck(std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace fbq
