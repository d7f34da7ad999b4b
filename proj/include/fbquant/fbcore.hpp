// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Feedback quantization of a linear layer: the main path stores Q(W - Σ), the
// low-rank sub-branch stores Σ = B·A, and the reconstructed weights are
// W_F = Q(W - Σ) + Σ. Every entry of W - W_F is a pure rounding error of the
// quantizer, so |w - w_F| <= s/2 no matter what Σ is.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fbquant/linalg.hpp"
#include "fbquant/quantizer.hpp"

namespace fbq {

/// Low-rank sub-branch Σ = B·A with A: rank x in_dim and B: out_dim x rank.
struct SubBranch {
  MatrixD a;
  MatrixD b;

  std::size_t rank() const noexcept { return a.rows(); }
  MatrixD sigma() const { return matmul(b, a); }
  void validate(std::size_t out_dim, std::size_t in_dim) const;
};

/// A ~ N(0, stddev²) drawn from `seed`, B = 0 so that Σ starts at zero.
SubBranch init_subbranch(std::size_t out_dim, std::size_t in_dim, std::size_t rank, double stddev,
                         std::uint64_t seed);

struct LayerRecord {
  std::string name;
  MatrixD w;  // out_dim x in_dim
  MatrixD x;  // n_samples x in_dim

  void validate() const;
};

enum class StepRule { kFixed, kBacktracking };

enum class Method { kFbquant, kRtn, kSvdOfDelta, kDirectGd };

const char* method_name(Method m) noexcept;
/// Accepts "fbquant", "rtn", "svd_delta" (or "svd_of_delta") and "direct_gd".
Method parse_method(const std::string& name);

struct OptimizerSettings {
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  std::size_t rank = 128;
  std::uint64_t seed = 0;
  // A is drawn with standard deviation sigma_init / sqrt(in_dim).
  double sigma_init = 0.02;
  StepRule step_rule = StepRule::kFixed;

  void validate() const;
};

struct ReconstructionReport {
  std::string layer;
  Method method = Method::kFbquant;
  std::size_t rank = 0;
  // Entry 0 is the loss at Σ = 0 (plain RTN); entry e the loss after epoch e.
  std::vector<double> loss_per_epoch;
  double initial_rtn_loss = 0.0;
  double final_loss = 0.0;
  double max_weight_deviation = 0.0;
  double bound_s_half = 0.0;
  std::size_t bound_violations = 0;
  std::size_t rejected_steps = 0;
};

struct FeedbackResult {
  MatrixD w_f;
  QuantizedTensor q;
};

/// W_F = dequantize(Q(W - Σ)) + Σ, with group scales computed on W - Σ.
FeedbackResult fb_reconstruct(const MatrixD& w, const MatrixD& sigma, const QuantConfig& config);
FeedbackResult fb_reconstruct(const MatrixD& w, const SubBranch& sub, const QuantConfig& config);

/// tr(Δ·G·Δᵀ) for a residual Δ and a precomputed Gram matrix G.
double trace_loss(const MatrixD& delta, const MatrixD& gram_x);

/// Squared Frobenius output error ‖W·Xᵀ − W_F·Xᵀ‖², evaluated in trace form.
double reconstruction_loss(const MatrixD& w, const MatrixD& w_f, const MatrixD& x);

/// The same quantity computed directly from the output products.
double output_error_sq(const MatrixD& w, const MatrixD& w_f, const MatrixD& x);

/// ∂L/∂Σ = −2·Δ_F·XᵀX with W and Q(W − Σ) detached.
MatrixD grad_sigma(const MatrixD& delta_f, const MatrixD& gram_x);

/// Chain rule through Δ_F = W − Q(W − Σ) − Σ with an identity straight-through
/// estimate for Q. Without detaching the quantized term the Jacobian of Δ_F is
/// (0 + I − I) and the gradient vanishes identically.
MatrixD grad_sigma_chain(const MatrixD& delta_f, const MatrixD& gram_x, bool detach_quantized);

struct FactorGrads {
  MatrixD a;
  MatrixD b;
};

/// grad_B = grad_Σ·Aᵀ, grad_A = Bᵀ·grad_Σ.
FactorGrads grad_ab(const MatrixD& grad_sigma, const SubBranch& sub);

struct LayerResult {
  std::string name;
  QuantizedTensor q;
  SubBranch sub;
  ReconstructionReport report;
};

/// Layer-wise reconstruction: gradient descent on A and B against the
/// feedback loss, requantizing W − B·A at every step. The init stream is
/// seeded from (settings.seed, layer.name).
LayerResult optimize_layer(const LayerRecord& layer, const QuantConfig& qconfig,
                           const OptimizerSettings& settings);

enum class BaselineMethod { kSvdOfDelta, kDirectGd };

/// Conventional sub-branches on top of plain RTN weights: truncated SVD of the
/// quantization error, or gradient descent on ‖(Δ − Σ)Xᵀ‖². The result
/// W_Q + Σ carries no deviation bound.
LayerResult baseline_subbranch(const LayerRecord& layer, const QuantConfig& qconfig, std::size_t rank,
                               BaselineMethod method, const OptimizerSettings& settings = {});

/// Plain round-to-nearest, reported in the same shape as the other methods.
LayerResult rtn_layer(const LayerRecord& layer, const QuantConfig& qconfig);

/// Applies `method` to every layer independently. `threads == 0` uses the
/// hardware concurrency. Output order matches input order; errors carry the
/// failing layer's name.
std::vector<LayerResult> quantize_model(const std::vector<LayerRecord>& layers, const QuantConfig& qconfig,
                                        const OptimizerSettings& settings, Method method,
                                        std::size_t threads = 0);

/// W_Q + B·A using the stored quantized weights and sub-branch.
MatrixD reconstructed_weights(const QuantizedTensor& q, const SubBranch& sub);

}  // namespace fbq
