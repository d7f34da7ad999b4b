// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/fbquant.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "fbquant/errors.hpp"
#include "fbquant/fbcore.hpp"
#include "fbquant/gradcheck.hpp"
#include "fbquant/illposed.hpp"
#include "fbquant/io.hpp"
#include "fbquant/report.hpp"
#include "fbquant/runtime.hpp"

struct fbq_bundle {
  std::vector<fbq::LayerRecord> layers;
};

struct fbq_model {
  fbq::FbqModel model;
  // Present only for models produced in this process.
  bool has_report = false;
  std::vector<fbq::LayerResult> results;
  fbq::OptimizerSettings settings;
  fbq::Method method = fbq::Method::kFbquant;
};

namespace {

thread_local std::string g_last_error;

fbq_status fail(fbq_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename Fn>
fbq_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return FBQ_OK;
  } catch (const fbq::ShapeError& e) {
    return fail(FBQ_ERR_SHAPE, e.what());
  } catch (const fbq::ValueError& e) {
    return fail(FBQ_ERR_VALUE, e.what());
  } catch (const fbq::FormatError& e) {
    return fail(FBQ_ERR_FORMAT, e.what());
  } catch (const fbq::SchemaError& e) {
    return fail(FBQ_ERR_SCHEMA, e.what());
  } catch (const fbq::DataError& e) {
    return fail(FBQ_ERR_DATA, e.what());
  } catch (const fbq::IoError& e) {
    return fail(FBQ_ERR_IO, e.what());
  } catch (const fbq::PreconditionError& e) {
    return fail(FBQ_ERR_PRECONDITION, e.what());
  } catch (const fbq::ConvergenceError& e) {
    return fail(FBQ_ERR_CONVERGENCE, std::string(e.what()) + " (residual " + std::to_string(e.residual()) + ")");
  } catch (const fbq::NumericError& e) {
    return fail(FBQ_ERR_NUMERIC, e.what());
  } catch (const std::bad_alloc&) {
    return fail(FBQ_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(FBQ_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(FBQ_ERR_INTERNAL, "unknown error");
  }
}

char* to_c_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void require(bool cond, const char* message) {
  if (!cond) throw fbq::ValueError(message);
}

fbq::QuantConfig qconfig_from(const fbq_quant_options& o) {
  fbq::QuantConfig c;
  c.bits = o.bits;
  c.group_size = o.group_size;
  c.validate();
  return c;
}

fbq::OptimizerSettings settings_from(const fbq_quant_options& o) {
  fbq::OptimizerSettings s;
  s.epochs = o.epochs;
  s.learning_rate = o.learning_rate;
  s.rank = o.rank;
  s.seed = o.seed;
  s.sigma_init = o.sigma_init;
  s.step_rule = o.backtracking != 0 ? fbq::StepRule::kBacktracking : fbq::StepRule::kFixed;
  return s;
}

}  // namespace

extern "C" {

const char* fbq_version(void) { return fbq::kToolkitVersion; }

const char* fbq_status_string(fbq_status status) {
  switch (status) {
    case FBQ_OK: return "ok";
    case FBQ_ERR_INVALID_ARGUMENT: return "invalid argument";
    case FBQ_ERR_SHAPE: return "shape error";
    case FBQ_ERR_VALUE: return "value error";
    case FBQ_ERR_FORMAT: return "format error";
    case FBQ_ERR_SCHEMA: return "schema error";
    case FBQ_ERR_DATA: return "data error";
    case FBQ_ERR_IO: return "i/o error";
    case FBQ_ERR_PRECONDITION: return "precondition failed";
    case FBQ_ERR_NUMERIC: return "numeric error";
    case FBQ_ERR_CONVERGENCE: return "convergence failure";
    case FBQ_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* fbq_last_error(void) { return g_last_error.c_str(); }

int fbq_status_is_numeric(fbq_status status) {
  return status == FBQ_ERR_NUMERIC || status == FBQ_ERR_CONVERGENCE ? 1 : 0;
}

void fbq_string_free(char* s) { std::free(s); }

fbq_status fbq_bundle_load(const char* path, fbq_bundle** out) {
  if (path == nullptr || out == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto b = std::make_unique<fbq_bundle>();
    b->layers = fbq::load_bundle(path);
    *out = b.release();
  });
}

void fbq_bundle_free(fbq_bundle* bundle) { delete bundle; }

size_t fbq_bundle_size(const fbq_bundle* bundle) { return bundle == nullptr ? 0 : bundle->layers.size(); }

fbq_status fbq_bundle_layer_info(const fbq_bundle* bundle, size_t index, const char** name, size_t* out_dim,
                                 size_t* in_dim, size_t* n_samples) {
  if (bundle == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null bundle");
  if (index >= bundle->layers.size()) return fail(FBQ_ERR_INVALID_ARGUMENT, "layer index out of range");
  const auto& l = bundle->layers[index];
  if (name != nullptr) *name = l.name.c_str();
  if (out_dim != nullptr) *out_dim = l.w.rows();
  if (in_dim != nullptr) *in_dim = l.w.cols();
  if (n_samples != nullptr) *n_samples = l.x.rows();
  return FBQ_OK;
}

void fbq_quant_options_default(fbq_quant_options* opts) {
  if (opts == nullptr) return;
  const fbq::QuantConfig qc;
  const fbq::OptimizerSettings s;
  opts->bits = qc.bits;
  opts->group_size = qc.group_size;
  opts->rank = s.rank;
  opts->epochs = s.epochs;
  opts->learning_rate = s.learning_rate;
  opts->sigma_init = s.sigma_init;
  opts->seed = s.seed;
  opts->backtracking = s.step_rule == fbq::StepRule::kBacktracking ? 1 : 0;
  opts->method = "fbquant";
  opts->threads = 0;
}

fbq_status fbq_quantize(const fbq_bundle* bundle, const fbq_quant_options* opts, fbq_model** out) {
  if (bundle == nullptr || opts == nullptr || out == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    const fbq::QuantConfig qc = qconfig_from(*opts);
    const fbq::OptimizerSettings settings = settings_from(*opts);
    const fbq::Method method = fbq::parse_method(opts->method != nullptr ? opts->method : "fbquant");
    // Plain RTN ignores the optimizer settings.
    if (method != fbq::Method::kRtn) settings.validate();
    auto m = std::make_unique<fbq_model>();
    m->results = fbq::quantize_model(bundle->layers, qc, settings, method, opts->threads);
    m->model = fbq::decode_fbq(fbq::encode_fbq(m->results));
    m->model.qconfig = qc;
    m->has_report = true;
    m->settings = settings;
    m->method = method;
    *out = m.release();
  });
}

fbq_status fbq_model_save(const fbq_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::vector<fbq::LayerResult> results;
    results.reserve(model->model.layers.size());
    for (const auto& l : model->model.layers) results.push_back({l.name, l.q, l.sub, {}});
    fbq::save_fbq(path, results);
  });
}

fbq_status fbq_model_load(const char* path, fbq_model** out) {
  if (path == nullptr || out == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto m = std::make_unique<fbq_model>();
    m->model = fbq::load_fbq(path);
    *out = m.release();
  });
}

void fbq_model_free(fbq_model* model) { delete model; }

size_t fbq_model_size(const fbq_model* model) { return model == nullptr ? 0 : model->model.layers.size(); }

fbq_status fbq_model_report_json(const fbq_model* model, char** json) {
  if (model == nullptr || json == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *json = nullptr;
  if (!model->has_report) return fail(FBQ_ERR_PRECONDITION, "model was loaded from disk and carries no report");
  return guarded([&] {
    *json = to_c_string(fbq::quantize_report_json(model->results, model->model.qconfig, model->settings, model->method));
  });
}

fbq_status fbq_model_loss_svg(const fbq_model* model, char** svg) {
  if (model == nullptr || svg == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *svg = nullptr;
  if (!model->has_report) return fail(FBQ_ERR_PRECONDITION, "model was loaded from disk and carries no report");
  return guarded([&] { *svg = to_c_string(fbq::loss_curve_svg(model->results)); });
}

fbq_status fbq_evaluate_json(const fbq_bundle* bundle, const fbq_model* model, char** json) {
  if (bundle == nullptr || model == nullptr || json == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  *json = nullptr;
  return guarded([&] { *json = to_c_string(fbq::eval_report_json(fbq::evaluate_model(bundle->layers, model->model))); });
}

fbq_status fbq_illposed_demo(const fbq_bundle* bundle, const fbq_quant_options* opts, const double* alphas,
                             size_t n_alphas, char** json, char** svg) {
  if (bundle == nullptr || opts == nullptr || json == nullptr || (alphas == nullptr && n_alphas > 0)) {
    return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  }
  *json = nullptr;
  if (svg != nullptr) *svg = nullptr;
  return guarded([&] {
    const fbq::QuantConfig qc = qconfig_from(*opts);
    const fbq::OptimizerSettings settings = settings_from(*opts);
    settings.validate();
    const std::vector<double> alpha_list(alphas, alphas + n_alphas);
    require(!alpha_list.empty(), "at least one alpha is required");
    for (double a : alpha_list) require(std::isfinite(a) && a >= 0.0, "alphas must be finite and non-negative");
    require(settings.rank > 0, "the perturbation needs rank >= 1");

    std::vector<fbq::IllposedLayerOutcome> outcomes;
    for (const auto& layer : bundle->layers) {
      fbq::IllposedLayerOutcome o;
      o.layer = layer.name;
      try {
        fbq::null_directions(layer.x, 1);
        o.report = fbq::run_illposed_demo(fbq::make_scenario(layer, qc, settings, alpha_list), qc);
        o.report.layer = layer.name;
      } catch (const fbq::PreconditionError& e) {
        o.skipped = true;
        o.reason = e.what();
      }
      outcomes.push_back(std::move(o));
    }
    *json = to_c_string(fbq::illposed_report_json(outcomes, qc, settings));
    if (svg != nullptr) *svg = to_c_string(fbq::deviation_svg(outcomes));
  });
}

fbq_status fbq_benchmark(const char* shapes, size_t reps, int bits, size_t group_size, uint64_t seed, char** csv,
                         char** json) {
  if (shapes == nullptr) return fail(FBQ_ERR_INVALID_ARGUMENT, "null argument");
  if (csv != nullptr) *csv = nullptr;
  if (json != nullptr) *json = nullptr;
  return guarded([&] {
    fbq::BenchmarkOptions o;
    o.reps = reps;
    o.bits = bits;
    o.group_size = group_size;
    o.seed = seed;
    const auto rows = fbq::benchmark(fbq::parse_shapes(shapes), o);
    std::string csv_text = fbq::benchmark_csv(rows);
    std::string json_text = fbq::benchmark_json(rows, reps);
    if (csv != nullptr) *csv = to_c_string(csv_text);
    if (json != nullptr) {
      try {
        *json = to_c_string(json_text);
      } catch (...) {
        if (csv != nullptr) {
          std::free(*csv);
          *csv = nullptr;
        }
        throw;
      }
    }
  });
}

fbq_status fbq_gradcheck(uint64_t seed, double* max_rel_error, int* ste_all_zero, char** json) {
  if (json != nullptr) *json = nullptr;
  return guarded([&] {
    const fbq::GradcheckSummary s = fbq::run_gradcheck(seed);
    if (max_rel_error != nullptr) *max_rel_error = s.max_rel();
    if (ste_all_zero != nullptr) *ste_all_zero = s.ste_all_zero ? 1 : 0;
    if (json != nullptr) *json = to_c_string(fbq::gradcheck_json(s, seed));
  });
}

fbq_status fbq_macs_overhead(uint64_t b, uint64_t d, uint64_t r, uint64_t* m0, uint64_t* m1, double* ratio) {
  return guarded([&] {
    const fbq::MacsOverhead m = fbq::macs_overhead({b, d, r});
    if (m0 != nullptr) *m0 = m.m0;
    if (m1 != nullptr) *m1 = m.m1;
    if (ratio != nullptr) *ratio = m.ratio;
  });
}

}  // extern "C"
