// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON reports, offline evaluation and SVG charts. Reports contain no
// timestamps so identical inputs give byte-identical files.

#pragma once

#include <string>
#include <vector>

#include "fbquant/fbcore.hpp"
#include "fbquant/gradcheck.hpp"
#include "fbquant/illposed.hpp"
#include "fbquant/io.hpp"
#include "fbquant/runtime.hpp"

namespace fbq {

struct EvalEntry {
  std::string layer;
  std::size_t out_dim = 0;
  std::size_t in_dim = 0;
  std::size_t rank = 0;
  // ‖W·Xᵀ − W_F·Xᵀ‖_F / ‖W·Xᵀ‖_F
  double relative_output_error = 0.0;
  double max_weight_deviation = 0.0;
};

/// Evaluates every bundle layer against the model layer of the same name.
std::vector<EvalEntry> evaluate_model(const std::vector<LayerRecord>& bundle, const FbqModel& model);

std::string quantize_report_json(const std::vector<LayerResult>& results, const QuantConfig& qconfig,
                                 const OptimizerSettings& settings, Method method);
std::string eval_report_json(const std::vector<EvalEntry>& entries);

struct IllposedLayerOutcome {
  std::string layer;
  bool skipped = false;
  std::string reason;
  IllposedReport report;
};
std::string illposed_report_json(const std::vector<IllposedLayerOutcome>& outcomes, const QuantConfig& qconfig,
                                 const OptimizerSettings& settings);

std::string benchmark_json(const std::vector<BenchmarkRow>& rows, std::size_t reps);
std::string gradcheck_json(const GradcheckSummary& summary, std::uint64_t seed);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal line chart; `log_y` plots log10 of strictly positive values.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, bool log_y);

std::string loss_curve_svg(const std::vector<LayerResult>& results);
std::string deviation_svg(const std::vector<IllposedLayerOutcome>& outcomes);

}  // namespace fbq
