// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the toolkit only through the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fbquant/fbquant.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumeric = 2;
constexpr double kGradcheckTolerance = 1e-4;

struct CliFailure {
  int code;
};

struct BundleDeleter {
  void operator()(fbq_bundle* b) const { fbq_bundle_free(b); }
};
struct ModelDeleter {
  void operator()(fbq_model* m) const { fbq_model_free(m); }
};
struct StringDeleter {
  void operator()(char* s) const { fbq_string_free(s); }
};
using BundlePtr = std::unique_ptr<fbq_bundle, BundleDeleter>;
using ModelPtr = std::unique_ptr<fbq_model, ModelDeleter>;
using CString = std::unique_ptr<char, StringDeleter>;

void check(fbq_status status) {
  if (status == FBQ_OK) return;
  std::cerr << "error: " << fbq_status_string(status) << ": " << fbq_last_error() << "\n";
  throw CliFailure{fbq_status_is_numeric(status) ? kExitNumeric : kExitValidation};
}

void write_output(const std::string& path, const char* text) {
  std::ofstream out(path, std::ios::binary);
  if (out) out << text;
  if (!out) {
    std::cerr << "error: cannot write '" << path << "'\n";
    throw CliFailure{kExitValidation};
  }
}

BundlePtr open_bundle(const std::string& path) {
  fbq_bundle* raw = nullptr;
  check(fbq_bundle_load(path.c_str(), &raw));
  return BundlePtr(raw);
}

std::vector<double> parse_alphas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      std::cerr << "error: invalid alpha '" << item << "'\n";
      throw CliFailure{kExitValidation};
    }
  }
  return out;
}

struct QuantFlags {
  int bits = 4;
  std::size_t group = 128;
  std::size_t rank = 128;
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  double sigma_init = 0.02;
  std::uint64_t seed = 0;
  std::string step_rule = "fixed";
  std::size_t threads = 0;

  void add_to(CLI::App* app) {
    app->add_option("--bits", bits, "Code width")->check(CLI::IsMember({2, 3, 4, 8}))->capture_default_str();
    app->add_option("--group", group, "Group size along the input dimension")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->add_option("--rank", rank, "Sub-branch rank")->capture_default_str();
    app->add_option("--epochs", epochs, "Optimization epochs")->capture_default_str();
    app->add_option("--lr", learning_rate, "Initial step size")->capture_default_str();
    app->add_option("--sigma-init", sigma_init, "Scale of the A initialization")->capture_default_str();
    app->add_option("--seed", seed, "Random seed")->capture_default_str();
    app->add_option("--step-rule", step_rule, "Step size rule")
        ->check(CLI::IsMember({"fixed", "backtracking"}))
        ->capture_default_str();
    app->add_option("--threads", threads, "Worker threads, 0 for all cores")->capture_default_str();
  }

  fbq_quant_options options() const {
    fbq_quant_options o;
    fbq_quant_options_default(&o);
    o.bits = bits;
    o.group_size = group;
    o.rank = rank;
    o.epochs = epochs;
    o.learning_rate = learning_rate;
    o.sigma_init = sigma_init;
    o.seed = seed;
    o.backtracking = step_rule == "backtracking" ? 1 : 0;
    o.threads = threads;
    return o;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FBQuant weight-only quantization toolkit"};
  app.set_version_flag("--version", std::string(fbq_version()));
  app.require_subcommand(1);

  QuantFlags qflags;
  std::string bundle_path, out_path, report_path, plot_path, method = "fbquant";
  auto* quantize = app.add_subcommand("quantize", "Quantize every layer of a calibration bundle");
  quantize->add_option("--bundle", bundle_path, "Calibration bundle (safetensors)")->required();
  qflags.add_to(quantize);
  quantize->add_option("--method", method, "Reconstruction method")
      ->check(CLI::IsMember({"fbquant", "rtn", "svd_delta", "direct_gd"}))
      ->capture_default_str();
  quantize->add_option("--out", out_path, "Output FBQ1 container")->required();
  quantize->add_option("--report", report_path, "Output JSON report")->required();
  quantize->add_option("--plot", plot_path, "Optional SVG loss curves");

  std::string model_path;
  auto* eval = app.add_subcommand("eval", "Relative output error of a quantized model");
  eval->add_option("--bundle", bundle_path, "Calibration bundle (safetensors)")->required();
  eval->add_option("--model", model_path, "FBQ1 container")->required();
  eval->add_option("--report", report_path, "Output JSON report")->required();

  std::string shapes = "decode", csv_path, json_path;
  std::size_t reps = 30;
  auto* bench = app.add_subcommand("bench", "Naive versus fused layer microbenchmark");
  bench->add_option("--shapes", shapes, "Comma list of b:d:r, or decode / prefill")->capture_default_str();
  bench->add_option("--reps", reps, "Timed repetitions")->capture_default_str();
  bench->add_option("--csv", csv_path, "Output CSV table")->required();
  bench->add_option("--json", json_path, "Optional JSON twin of the table");
  bench->add_option("--bits", qflags.bits, "Code width")->check(CLI::IsMember({2, 3, 4, 8}))->capture_default_str();
  bench->add_option("--group", qflags.group, "Group size")->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--seed", qflags.seed, "Random seed")->capture_default_str();

  std::string alphas = "0,1,10,100";
  auto* demo = app.add_subcommand("illposed-demo", "Null-space perturbation study");
  demo->add_option("--bundle", bundle_path, "Calibration bundle (safetensors)")->required();
  demo->add_option("--alphas", alphas, "Comma list of perturbation scales")->capture_default_str();
  demo->add_option("--out", out_path, "Output JSON report")->required();
  demo->add_option("--plot", plot_path, "Optional SVG deviation chart");
  qflags.add_to(demo);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gradcheck->add_option("--seed", qflags.seed, "Random seed")->capture_default_str();
  gradcheck->add_option("--json", json_path, "Optional JSON summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    std::cout << fbq_version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return kExitValidation;
  }

  try {
    if (quantize->parsed()) {
      const BundlePtr bundle = open_bundle(bundle_path);
      fbq_quant_options o = qflags.options();
      o.method = method.c_str();
      fbq_model* raw = nullptr;
      check(fbq_quantize(bundle.get(), &o, &raw));
      const ModelPtr model(raw);
      check(fbq_model_save(model.get(), out_path.c_str()));
      char* json = nullptr;
      check(fbq_model_report_json(model.get(), &json));
      write_output(report_path, CString(json).get());
      if (!plot_path.empty()) {
        char* svg = nullptr;
        check(fbq_model_loss_svg(model.get(), &svg));
        write_output(plot_path, CString(svg).get());
      }
      std::cout << "quantized " << fbq_model_size(model.get()) << " layer(s) into " << out_path << "\n";
    } else if (eval->parsed()) {
      const BundlePtr bundle = open_bundle(bundle_path);
      fbq_model* raw = nullptr;
      check(fbq_model_load(model_path.c_str(), &raw));
      const ModelPtr model(raw);
      char* json = nullptr;
      check(fbq_evaluate_json(bundle.get(), model.get(), &json));
      write_output(report_path, CString(json).get());
      std::cout << "evaluated " << fbq_bundle_size(bundle.get()) << " layer(s)\n";
    } else if (bench->parsed()) {
      char* csv = nullptr;
      char* json = nullptr;
      check(fbq_benchmark(shapes.c_str(), reps, qflags.bits, qflags.group, qflags.seed, &csv,
                          json_path.empty() ? nullptr : &json));
      const CString csv_text(csv), json_text(json);
      write_output(csv_path, csv_text.get());
      if (json_text) write_output(json_path, json_text.get());
      std::cout << csv_text.get();
    } else if (demo->parsed()) {
      const BundlePtr bundle = open_bundle(bundle_path);
      const std::vector<double> alpha_list = parse_alphas(alphas);
      const fbq_quant_options o = qflags.options();
      char* json = nullptr;
      char* svg = nullptr;
      check(fbq_illposed_demo(bundle.get(), &o, alpha_list.data(), alpha_list.size(), &json,
                              plot_path.empty() ? nullptr : &svg));
      const CString json_text(json), svg_text(svg);
      write_output(out_path, json_text.get());
      if (svg_text) write_output(plot_path, svg_text.get());
      std::cout << "wrote " << out_path << "\n";
    } else if (gradcheck->parsed()) {
      double max_rel = 0.0;
      int ste_zero = 0;
      char* json = nullptr;
      check(fbq_gradcheck(qflags.seed, &max_rel, &ste_zero, json_path.empty() ? nullptr : &json));
      const CString json_text(json);
      if (json_text) write_output(json_path, json_text.get());
      char line[96];
      std::snprintf(line, sizeof line, "max relative gradient error: %.3e\n", max_rel);
      std::cout << line << "undetached gradient all zero: " << (ste_zero != 0 ? "yes" : "no") << "\n";
      if (!(max_rel < kGradcheckTolerance) || ste_zero == 0) return kExitNumeric;
    }
  } catch (const CliFailure& f) {
    return f.code;
  }
  return kExitOk;
}
