// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fbq {

namespace {

using ojson = nlohmann::ordered_json;

ojson qconfig_json(const QuantConfig& c) {
  return {{"bits", c.bits},
          {"group_size", c.group_size},
          {"scheme", "asymmetric_minmax"},
          {"rounding", "half_away_from_zero"}};
}

ojson settings_json(const OptimizerSettings& s) {
  return {{"epochs", s.epochs},
          {"learning_rate", s.learning_rate},
          {"rank", s.rank},
          {"sigma_init", s.sigma_init},
          {"step_rule", s.step_rule == StepRule::kFixed ? "fixed" : "backtracking"}};
}

ojson layer_report_json(const ReconstructionReport& r) {
  return {{"layer", r.layer},
          {"method", method_name(r.method)},
          {"rank", r.rank},
          {"loss_per_epoch", r.loss_per_epoch},
          {"initial_rtn_loss", r.initial_rtn_loss},
          {"final_loss", r.final_loss},
          {"max_weight_deviation", r.max_weight_deviation},
          {"bound_s_half", r.bound_s_half},
          {"bound_violations", r.bound_violations},
          {"rejected_steps", r.rejected_steps}};
}

std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::vector<EvalEntry> evaluate_model(const std::vector<LayerRecord>& bundle, const FbqModel& model) {
  std::map<std::string, const FbqLayer*> by_name;
  for (const auto& l : model.layers) by_name[l.name] = &l;
  std::vector<EvalEntry> out;
  for (const auto& rec : bundle) {
    const auto it = by_name.find(rec.name);
    if (it == by_name.end()) throw SchemaError("model has no layer named '" + rec.name + "'");
    const FbqLayer& layer = *it->second;
    if (layer.q.out_dim != rec.w.rows() || layer.q.in_dim != rec.w.cols()) {
      throw ShapeError("layer '" + rec.name + "': model shape does not match bundle weights");
    }
    const MatrixD w_f = reconstructed_weights(layer.q, layer.sub);
    const double ref = frobenius_sq(matmul_nt(rec.w, rec.x));
    const double err = output_error_sq(rec.w, w_f, rec.x);
    EvalEntry e;
    e.layer = rec.name;
    e.out_dim = layer.q.out_dim;
    e.in_dim = layer.q.in_dim;
    e.rank = layer.sub.rank();
    e.relative_output_error = ref > 0.0 ? std::sqrt(err / ref) : std::sqrt(err);
    e.max_weight_deviation = max_abs_diff(rec.w, w_f);
    out.push_back(std::move(e));
  }
  return out;
}

std::string quantize_report_json(const std::vector<LayerResult>& results, const QuantConfig& qconfig,
                                 const OptimizerSettings& settings, Method method) {
  ojson layers = ojson::array();
  std::size_t violations = 0;
  for (const auto& r : results) {
    layers.push_back(layer_report_json(r.report));
    violations += r.report.bound_violations;
  }
  ojson j;
  j["toolkit_version"] = kToolkitVersion;
  j["seed"] = settings.seed;
  j["method"] = method_name(method);
  j["qconfig"] = qconfig_json(qconfig);
  j["settings"] = settings_json(settings);
  j["layers"] = std::move(layers);
  j["total_bound_violations"] = violations;
  return dump(j);
}

std::string eval_report_json(const std::vector<EvalEntry>& entries) {
  ojson layers = ojson::array();
  double sum = 0.0;
  for (const auto& e : entries) {
    layers.push_back({{"layer", e.layer},
                      {"out_dim", e.out_dim},
                      {"in_dim", e.in_dim},
                      {"rank", e.rank},
                      {"relative_output_error", e.relative_output_error},
                      {"max_weight_deviation", e.max_weight_deviation}});
    sum += e.relative_output_error;
  }
  ojson j;
  j["toolkit_version"] = kToolkitVersion;
  j["layers"] = std::move(layers);
  j["mean_relative_output_error"] = entries.empty() ? 0.0 : sum / static_cast<double>(entries.size());
  return dump(j);
}

std::string illposed_report_json(const std::vector<IllposedLayerOutcome>& outcomes, const QuantConfig& qconfig,
                                 const OptimizerSettings& settings) {
  ojson layers = ojson::array();
  for (const auto& o : outcomes) {
    ojson entry;
    entry["layer"] = o.layer;
    if (o.skipped) {
      entry["skipped"] = true;
      entry["reason"] = o.reason;
      layers.push_back(std::move(entry));
      continue;
    }
    entry["skipped"] = false;
    entry["null_dim"] = o.report.null_dim;
    entry["sigma_star_loss"] = o.report.sigma_star_loss;
    ojson points = ojson::array();
    for (const auto& p : o.report.points) {
      points.push_back({{"alpha", p.alpha},
                        {"loss_delta", p.loss_delta},
                        {"max_deviation_conventional", p.max_deviation_conventional},
                        {"max_deviation_fbquant", p.max_deviation_fbquant},
                        {"bound_s_half", p.bound_s_half},
                        {"rtn_s_half", p.rtn_s_half},
                        {"fbquant_bound_violations", p.fbquant_bound_violations}});
    }
    entry["points"] = std::move(points);
    layers.push_back(std::move(entry));
  }
  ojson j;
  j["toolkit_version"] = kToolkitVersion;
  j["seed"] = settings.seed;
  j["qconfig"] = qconfig_json(qconfig);
  j["settings"] = settings_json(settings);
  j["layers"] = std::move(layers);
  return dump(j);
}

std::string benchmark_json(const std::vector<BenchmarkRow>& rows, std::size_t reps) {
  ojson out = ojson::array();
  for (const auto& r : rows) {
    ojson buffers = ojson::object();
    for (std::size_t i = 0; i < kTrafficBufferCount; ++i) {
      buffers[traffic_buffer_name(static_cast<TrafficBuffer>(i))] = {{"read", r.counters.read[i]},
                                                                     {"written", r.counters.written[i]}};
    }
    out.push_back({{"variant", r.variant},
                   {"threads", r.threads},
                   {"b", r.shape.b},
                   {"d", r.shape.d},
                   {"r", r.shape.r},
                   {"bits", r.bits},
                   {"median_ns", r.median_ns},
                   {"tokens_per_s", r.tokens_per_s},
                   {"bytes_read", r.counters.bytes_read()},
                   {"bytes_written", r.counters.bytes_written()},
                   {"kernels", r.counters.kernels_launched},
                   {"macs", r.counters.macs},
                   {"buffers", std::move(buffers)}});
  }
  ojson j;
  j["toolkit_version"] = kToolkitVersion;
  j["reps"] = reps;
  j["rows"] = std::move(out);
  return dump(j);
}

std::string gradcheck_json(const GradcheckSummary& s, std::uint64_t seed) {
  ojson j;
  j["toolkit_version"] = kToolkitVersion;
  j["seed"] = seed;
  j["instances"] = s.instances;
  j["max_rel_error"] = s.max_rel();
  j["max_rel_error_sigma"] = s.max_rel_sigma;
  j["max_rel_error_a"] = s.max_rel_a;
  j["max_rel_error_b"] = s.max_rel_b;
  j["ste_undetached_all_zero"] = s.ste_all_zero;
  return dump(j);
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, bool log_y) {
  constexpr double kW = 640, kH = 400, kL = 70, kR = 160, kT = 40, kB = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  auto ty = [&](double v) { return log_y ? std::log10(std::max(v, 1e-300)) : v; };

  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (log_y && !(s.y[i] > 0.0)) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (!(x0 < x1)) {
    x0 = std::isfinite(x0) ? x0 - 1 : 0;
    x1 = x0 + 2;
  }
  if (!(y0 < y1)) {
    y0 = std::isfinite(y0) ? y0 - 1 : 0;
    y1 = y0 + 2;
  }
  auto px = [&](double x) { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - (ty(y) - y0) / (y1 - y0) * (kH - kT - kB); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape_xml(title)
     << "</text>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << escape_xml(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (kT + kH - kB) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (kT + kH - kB) / 2 << ")\">" << escape_xml(log_y ? "log10 " + y_label : y_label) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0;
    const double yv = y0 + (y1 - y0) * t / 4.0;
    const double yp = kH - kB - (kH - kT - kB) * t / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << kH - kB + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << fmt(xv) << "</text>\n";
    os << "<text x=\"" << kL - 6 << "\" y=\"" << yp + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(yv)
       << "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kColors[si % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (log_y && !(s.y[i] > 0.0)) continue;
      os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << kW - kR + 10 << "\" y=\"" << kT + 16 * static_cast<double>(si) << "\" font-size=\"11\" fill=\""
       << color << "\">" << escape_xml(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string loss_curve_svg(const std::vector<LayerResult>& results) {
  std::vector<Series> series;
  for (const auto& r : results) {
    Series s{r.name, {}, {}};
    for (std::size_t e = 0; e < r.report.loss_per_epoch.size(); ++e) {
      s.x.push_back(static_cast<double>(e));
      s.y.push_back(r.report.loss_per_epoch[e]);
    }
    series.push_back(std::move(s));
  }
  return svg_line_chart("Reconstruction loss", "epoch", "loss", series, true);
}

std::string deviation_svg(const std::vector<IllposedLayerOutcome>& outcomes) {
  std::vector<Series> series;
  for (const auto& o : outcomes) {
    if (o.skipped) continue;
    Series conv{o.layer + " conventional", {}, {}};
    Series fb{o.layer + " feedback", {}, {}};
    for (const auto& p : o.report.points) {
      const double x = std::log10(1.0 + p.alpha);
      conv.x.push_back(x);
      conv.y.push_back(p.max_deviation_conventional);
      fb.x.push_back(x);
      fb.y.push_back(p.max_deviation_fbquant);
    }
    series.push_back(std::move(conv));
    series.push_back(std::move(fb));
  }
  return svg_line_chart("Max weight deviation vs perturbation", "log10(1 + alpha)", "max |w - w'|", series, true);
}

}  // namespace fbq
