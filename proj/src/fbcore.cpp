// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/fbcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <optional>
#include <random>
#include <thread>

namespace fbq {

namespace {

constexpr int kMaxHalvings = 20;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t layer_seed(std::uint64_t seed, const std::string& name) { return splitmix64(seed ^ fnv1a(name)); }

double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

bool all_finite(const FactorGrads& g) { return g.a.all_finite() && g.b.all_finite(); }

struct Evaluation {
  double loss;
  MatrixD residual;  // the Δ whose gradient is −2·Δ·G
};

using Evaluator = std::function<Evaluation(const SubBranch&)>;

// A candidate the quantizer cannot represent counts as a rejected step.
std::optional<Evaluation> try_evaluate(const Evaluator& evaluate, const SubBranch& cand) {
  try {
    return evaluate(cand);
  } catch (const NumericError&) {
    return std::nullopt;
  }
}

// Full-batch gradient descent on (A, B). Returns the per-epoch losses.
std::vector<double> descend(SubBranch& sub, const MatrixD& g, const OptimizerSettings& settings,
                            const Evaluator& evaluate, std::size_t& rejected) {
  Evaluation cur = evaluate(sub);
  if (!std::isfinite(cur.loss)) throw NumericError("non-finite loss at epoch 0");
  std::vector<double> losses{cur.loss};
  double step = settings.learning_rate;

  for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    if (cur.loss == 0.0) break;
    const FactorGrads grads = grad_ab(grad_sigma(cur.residual, g), sub);
    if (!all_finite(grads)) throw NumericError("non-finite gradient at epoch " + std::to_string(epoch));

    if (settings.step_rule == StepRule::kFixed) {
      axpy(-step, grads.a, sub.a);
      axpy(-step, grads.b, sub.b);
      try {
        cur = evaluate(sub);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(cur.loss)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
    } else {
      double trial = step;
      bool accepted = false;
      for (int h = 0; h <= kMaxHalvings; ++h, trial /= 2.0) {
        SubBranch cand = sub;
        axpy(-trial, grads.a, cand.a);
        axpy(-trial, grads.b, cand.b);
        std::optional<Evaluation> e = try_evaluate(evaluate, cand);
        if (e && std::isfinite(e->loss) && e->loss < cur.loss) {
          sub = std::move(cand);
          cur = std::move(*e);
          accepted = true;
          break;
        }
        ++rejected;
      }
      // Grow after success; after a failed search resume below the smallest
      // step tried.
      step = accepted ? trial * 2.0 : trial;
    }
    losses.push_back(cur.loss);
  }
  return losses;
}

template <typename E>
bool rethrow_as(const std::exception_ptr& ep, const std::string& prefix) {
  try {
    std::rethrow_exception(ep);
  } catch (const E& e) {
    if constexpr (std::is_same_v<E, ConvergenceError>) {
      throw ConvergenceError(prefix + e.what(), e.residual());
    } else {
      throw E(prefix + e.what());
    }
  } catch (...) {
    return false;
  }
}

[[noreturn]] void rethrow_with_layer(const std::exception_ptr& ep, const std::string& layer) {
  const std::string prefix = "layer '" + layer + "': ";
  rethrow_as<ShapeError>(ep, prefix);
  rethrow_as<ValueError>(ep, prefix);
  rethrow_as<FormatError>(ep, prefix);
  rethrow_as<SchemaError>(ep, prefix);
  rethrow_as<DataError>(ep, prefix);
  rethrow_as<IoError>(ep, prefix);
  rethrow_as<PreconditionError>(ep, prefix);
  rethrow_as<NumericError>(ep, prefix);
  rethrow_as<ConvergenceError>(ep, prefix);
  try {
    std::rethrow_exception(ep);
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

}  // namespace

void SubBranch::validate(std::size_t out_dim, std::size_t in_dim) const {
  if (a.cols() != in_dim || b.rows() != out_dim || b.cols() != a.rows()) {
    throw ShapeError("sub-branch: A is " + detail::shape_str(a.rows(), a.cols()) + ", B is " +
                     detail::shape_str(b.rows(), b.cols()) + ", layer is " + detail::shape_str(out_dim, in_dim));
  }
}

SubBranch init_subbranch(std::size_t out_dim, std::size_t in_dim, std::size_t rank, double stddev,
                         std::uint64_t seed) {
  SubBranch sub{MatrixD(rank, in_dim), MatrixD(out_dim, rank)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (double& v : sub.a.values()) v = normal(rng);
  return sub;
}

void LayerRecord::validate() const {
  if (w.cols() != x.cols()) {
    throw ShapeError("layer '" + name + "': weight has " + std::to_string(w.cols()) +
                     " inputs but calibration has " + std::to_string(x.cols()));
  }
  if (x.rows() < 1) throw ValueError("layer '" + name + "': calibration needs at least one sample");
}

const char* method_name(Method m) noexcept {
  switch (m) {
    case Method::kFbquant: return "fbquant";
    case Method::kRtn: return "rtn";
    case Method::kSvdOfDelta: return "svd_delta";
    case Method::kDirectGd: return "direct_gd";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "fbquant") return Method::kFbquant;
  if (name == "rtn") return Method::kRtn;
  if (name == "svd_delta" || name == "svd_of_delta") return Method::kSvdOfDelta;
  if (name == "direct_gd") return Method::kDirectGd;
  throw ValueError("unknown method '" + name + "'");
}

void OptimizerSettings::validate() const {
  if (epochs < 1) throw ValueError("optimizer: epochs must be >= 1");
  if (rank < 1) throw ValueError("optimizer: rank must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValueError("optimizer: learning_rate must be > 0");
  if (!(sigma_init >= 0.0) || !std::isfinite(sigma_init)) throw ValueError("optimizer: sigma_init must be >= 0");
}

FeedbackResult fb_reconstruct(const MatrixD& w, const MatrixD& sigma, const QuantConfig& config) {
  detail::require_same_shape(w, sigma, "fb_reconstruct");
  QuantizedTensor q = quantize_rtn(w - sigma, config);
  MatrixD w_f = dequantize(q) + sigma;
  return {std::move(w_f), std::move(q)};
}

FeedbackResult fb_reconstruct(const MatrixD& w, const SubBranch& sub, const QuantConfig& config) {
  sub.validate(w.rows(), w.cols());
  return fb_reconstruct(w, sub.sigma(), config);
}

double trace_loss(const MatrixD& delta, const MatrixD& gram_x) {
  if (delta.cols() != gram_x.rows() || gram_x.rows() != gram_x.cols())
    throw ShapeError("trace_loss: residual and Gram matrix are incompatible");
  // tr(Δ G Δᵀ) = Σ_i (Δ G)_i · Δ_i
  const MatrixD dg = matmul(delta, gram_x);
  double acc = 0.0;
  auto a = dg.values();
  auto b = delta.values();
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double reconstruction_loss(const MatrixD& w, const MatrixD& w_f, const MatrixD& x) {
  detail::require_same_shape(w, w_f, "reconstruction_loss");
  if (x.cols() != w.cols()) throw ShapeError("reconstruction_loss: calibration width does not match weights");
  return trace_loss(w - w_f, gram(x));
}

double output_error_sq(const MatrixD& w, const MatrixD& w_f, const MatrixD& x) {
  detail::require_same_shape(w, w_f, "output_error_sq");
  return frobenius_sq(matmul_nt(w - w_f, x));
}

MatrixD grad_sigma(const MatrixD& delta_f, const MatrixD& gram_x) {
  if (delta_f.cols() != gram_x.rows()) throw ShapeError("grad_sigma: residual and Gram matrix are incompatible");
  return -2.0 * matmul(delta_f, gram_x);
}

MatrixD grad_sigma_chain(const MatrixD& delta_f, const MatrixD& gram_x, bool detach_quantized) {
  if (delta_f.cols() != gram_x.rows()) throw ShapeError("grad_sigma_chain: residual and Gram matrix are incompatible");
  // ∂L/∂Δ_F
  const MatrixD upstream = 2.0 * matmul(delta_f, gram_x);
  // Elementwise Jacobian of Δ_F = W − Q(W − Σ) − Σ: ∂W/∂Σ = 0, the STE gives
  // ∂Q(W − Σ)/∂Σ = −I unless detached, and ∂Σ/∂Σ = I.
  const double d_w = 0.0;
  const double d_q = detach_quantized ? 0.0 : -1.0;
  const double d_sigma = 1.0;
  const double jac = d_w - d_q - d_sigma;
  return jac * upstream;
}

FactorGrads grad_ab(const MatrixD& grad_sigma, const SubBranch& sub) {
  sub.validate(grad_sigma.rows(), grad_sigma.cols());
  return {matmul(sub.b.transposed(), grad_sigma), matmul_nt(grad_sigma, sub.a)};
}

MatrixD reconstructed_weights(const QuantizedTensor& q, const SubBranch& sub) {
  sub.validate(q.out_dim, q.in_dim);
  MatrixD w = dequantize(q);
  if (sub.rank() > 0) w = w + sub.sigma();
  return w;
}

LayerResult optimize_layer(const LayerRecord& layer, const QuantConfig& qconfig,
                           const OptimizerSettings& settings) {
  layer.validate();
  qconfig.validate();
  settings.validate();
  const MatrixD g = gram(layer.x);
  const double stddev = settings.sigma_init / std::sqrt(static_cast<double>(std::max<std::size_t>(layer.w.cols(), 1)));
  SubBranch sub =
      init_subbranch(layer.w.rows(), layer.w.cols(), settings.rank, stddev, layer_seed(settings.seed, layer.name));

  const Evaluator evaluate = [&](const SubBranch& s) {
    FeedbackResult fb = fb_reconstruct(layer.w, s.sigma(), qconfig);
    MatrixD delta = layer.w - fb.w_f;
    const double loss = trace_loss(delta, g);
    return Evaluation{loss, std::move(delta)};
  };

  ReconstructionReport report;
  report.layer = layer.name;
  report.method = Method::kFbquant;
  report.rank = settings.rank;
  report.loss_per_epoch = descend(sub, g, settings, evaluate, report.rejected_steps);
  report.initial_rtn_loss = report.loss_per_epoch.front();
  report.final_loss = report.loss_per_epoch.back();

  FeedbackResult fb = fb_reconstruct(layer.w, sub, qconfig);
  report.max_weight_deviation = max_abs_diff(layer.w, fb.w_f);
  report.bound_s_half = fb.q.max_half_scale();
  report.bound_violations = count_bound_violations(layer.w, fb.w_f, fb.q);
  return {layer.name, std::move(fb.q), std::move(sub), std::move(report)};
}

namespace {

ReconstructionReport conventional_report(const LayerRecord& layer, const QuantizedTensor& q, const MatrixD& w_q,
                                         const SubBranch& sub, Method method) {
  ReconstructionReport report;
  report.layer = layer.name;
  report.method = method;
  report.rank = sub.rank();
  MatrixD w_prime = sub.rank() > 0 ? w_q + sub.sigma() : w_q;
  report.max_weight_deviation = max_abs_diff(layer.w, w_prime);
  report.bound_s_half = q.max_half_scale();
  report.bound_violations = count_bound_violations(layer.w, w_prime, q);
  return report;
}

}  // namespace

LayerResult rtn_layer(const LayerRecord& layer, const QuantConfig& qconfig) {
  layer.validate();
  QuantizedTensor q = quantize_rtn(layer.w, qconfig);
  const MatrixD w_q = dequantize(q);
  SubBranch sub{MatrixD(0, layer.w.cols()), MatrixD(layer.w.rows(), 0)};
  ReconstructionReport report = conventional_report(layer, q, w_q, sub, Method::kRtn);
  const double loss = trace_loss(layer.w - w_q, gram(layer.x));
  report.loss_per_epoch = {loss};
  report.initial_rtn_loss = loss;
  report.final_loss = loss;
  return {layer.name, std::move(q), std::move(sub), std::move(report)};
}

LayerResult baseline_subbranch(const LayerRecord& layer, const QuantConfig& qconfig, std::size_t rank,
                               BaselineMethod method, const OptimizerSettings& settings) {
  layer.validate();
  qconfig.validate();
  const Method tag = method == BaselineMethod::kSvdOfDelta ? Method::kSvdOfDelta : Method::kDirectGd;
  if (rank == 0) {
    LayerResult r = rtn_layer(layer, qconfig);
    r.report.method = tag;
    return r;
  }

  QuantizedTensor q = quantize_rtn(layer.w, qconfig);
  const MatrixD w_q = dequantize(q);
  const MatrixD delta = layer.w - w_q;
  const MatrixD g = gram(layer.x);
  const double rtn_loss = trace_loss(delta, g);

  SubBranch sub;
  std::vector<double> losses;
  std::size_t rejected = 0;
  if (method == BaselineMethod::kSvdOfDelta) {
    const std::size_t k = std::min({rank, delta.rows(), delta.cols()});
    const SvdResult svd = truncated_svd(delta, k);
    sub.b = svd.u;
    for (std::size_t r = 0; r < sub.b.rows(); ++r)
      for (std::size_t j = 0; j < k; ++j) sub.b(r, j) *= svd.s[j];
    sub.a = svd.v;
    losses = {rtn_loss, trace_loss(delta - sub.sigma(), g)};
  } else {
    OptimizerSettings s = settings;
    s.rank = rank;
    s.validate();
    const double stddev = s.sigma_init / std::sqrt(static_cast<double>(std::max<std::size_t>(layer.w.cols(), 1)));
    sub = init_subbranch(layer.w.rows(), layer.w.cols(), rank, stddev, layer_seed(s.seed, layer.name));
    const Evaluator evaluate = [&](const SubBranch& cand) {
      MatrixD residual = delta - cand.sigma();
      const double loss = trace_loss(residual, g);
      return Evaluation{loss, std::move(residual)};
    };
    losses = descend(sub, g, s, evaluate, rejected);
  }

  ReconstructionReport report = conventional_report(layer, q, w_q, sub, tag);
  report.loss_per_epoch = std::move(losses);
  report.initial_rtn_loss = rtn_loss;
  report.final_loss = report.loss_per_epoch.back();
  report.rejected_steps = rejected;
  return {layer.name, std::move(q), std::move(sub), std::move(report)};
}

std::vector<LayerResult> quantize_model(const std::vector<LayerRecord>& layers, const QuantConfig& qconfig,
                                        const OptimizerSettings& settings, Method method, std::size_t threads) {
  if (layers.empty()) throw ValueError("quantize_model: no layers");
  qconfig.validate();

  auto run_one = [&](const LayerRecord& layer) -> LayerResult {
    switch (method) {
      case Method::kFbquant: return optimize_layer(layer, qconfig, settings);
      case Method::kRtn: return rtn_layer(layer, qconfig);
      case Method::kSvdOfDelta:
        return baseline_subbranch(layer, qconfig, settings.rank, BaselineMethod::kSvdOfDelta, settings);
      case Method::kDirectGd:
        return baseline_subbranch(layer, qconfig, settings.rank, BaselineMethod::kDirectGd, settings);
    }
    throw ValueError("quantize_model: unknown method");
  };

  std::vector<std::optional<LayerResult>> slots(layers.size());
  std::vector<std::exception_ptr> errors(layers.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < layers.size(); i = next.fetch_add(1)) {
      try {
        slots[i] = run_one(layers[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, layers.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  std::vector<LayerResult> out;
  out.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (errors[i]) rethrow_with_layer(errors[i], layers[i].name);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

}  // namespace fbq
