// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "fbquant/errors.hpp"
#include "fbquant/report.hpp"
#include "json.hpp"
#include "support/test_support.hpp"

namespace fbq {
namespace {

using nlohmann::json;
using testing::random_layer;

QuantConfig config() {
  QuantConfig c;
  c.bits = 4;
  c.group_size = 8;
  return c;
}

OptimizerSettings settings() {
  OptimizerSettings s;
  s.rank = 3;
  s.epochs = 4;
  s.seed = 11;
  return s;
}

std::vector<LayerRecord> layers() {
  std::mt19937_64 rng(9);
  return {random_layer("first", 10, 16, 4, rng), random_layer("second", 6, 16, 4, rng)};
}

TEST(QuantizeReport, CarriesPerLayerCurves) {
  const auto results = quantize_model(layers(), config(), settings(), Method::kFbquant, 1);
  const json j = json::parse(quantize_report_json(results, config(), settings(), Method::kFbquant));
  EXPECT_EQ(j["method"], "fbquant");
  EXPECT_EQ(j["seed"], 11);
  EXPECT_EQ(j["qconfig"]["bits"], 4);
  EXPECT_EQ(j["qconfig"]["group_size"], 8);
  EXPECT_EQ(j["settings"]["rank"], 3);
  ASSERT_EQ(j["layers"].size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const json& l = j["layers"][i];
    EXPECT_EQ(l["layer"], results[i].name);
    EXPECT_EQ(l["loss_per_epoch"].size(), results[i].report.loss_per_epoch.size());
    EXPECT_EQ(l["loss_per_epoch"][0].get<double>(), l["initial_rtn_loss"].get<double>());
    EXPECT_EQ(l["final_loss"].get<double>(), results[i].report.final_loss);
    EXPECT_EQ(l["bound_violations"], 0);
    EXPECT_LE(l["max_weight_deviation"].get<double>(), l["bound_s_half"].get<double>());
  }
  EXPECT_EQ(j["total_bound_violations"], 0);
}

TEST(QuantizeReport, IsDeterministic) {
  const auto a = quantize_model(layers(), config(), settings(), Method::kFbquant, 1);
  const auto b = quantize_model(layers(), config(), settings(), Method::kFbquant, 2);
  EXPECT_EQ(quantize_report_json(a, config(), settings(), Method::kFbquant),
            quantize_report_json(b, config(), settings(), Method::kFbquant));
  EXPECT_EQ(encode_fbq(a), encode_fbq(b));
}

TEST(EvalReport, MatchesDirectComputation) {
  const auto bundle = layers();
  const auto results = quantize_model(bundle, config(), settings(), Method::kRtn, 1);
  const FbqModel model = decode_fbq(encode_fbq(results));
  const auto entries = evaluate_model(bundle, model);
  ASSERT_EQ(entries.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto w = testing::to_eigen(bundle[i].w);
    const auto x = testing::to_eigen(bundle[i].x);
    const auto wq = testing::to_eigen(dequantize(results[i].q));
    const double expected = ((w - wq) * x.transpose()).norm() / (w * x.transpose()).norm();
    EXPECT_NEAR(entries[i].relative_output_error, expected, 1e-12);
    EXPECT_EQ(entries[i].rank, 0u);
  }
  const json j = json::parse(eval_report_json(entries));
  EXPECT_NEAR(j["mean_relative_output_error"].get<double>(),
              (entries[0].relative_output_error + entries[1].relative_output_error) / 2.0, 1e-15);
}

TEST(EvalReport, MissingOrMismatchedLayers) {
  auto bundle = layers();
  const FbqModel model = decode_fbq(encode_fbq(quantize_model(bundle, config(), settings(), Method::kRtn, 1)));
  auto extra = bundle;
  extra.push_back({"third", bundle[0].w, bundle[0].x});
  EXPECT_THROW(evaluate_model(extra, model), SchemaError);
  auto reshaped = bundle;
  reshaped[1].w = MatrixD(7, 16);
  EXPECT_THROW(evaluate_model(reshaped, model), ShapeError);
}

TEST(IllposedReport, SkippedLayersCarryReason) {
  IllposedLayerOutcome skipped{"full", true, "calibration Gram matrix is full rank", {}};
  IllposedLayerOutcome run{"ok", false, "", {}};
  run.report.null_dim = 5;
  run.report.points.push_back({0.0, 0.0, 0.1, 0.05, 0.06, 0.06, 0});
  const json j = json::parse(illposed_report_json({skipped, run}, config(), settings()));
  ASSERT_EQ(j["layers"].size(), 2u);
  EXPECT_TRUE(j["layers"][0]["skipped"].get<bool>());
  EXPECT_EQ(j["layers"][0]["reason"], "calibration Gram matrix is full rank");
  EXPECT_FALSE(j["layers"][0].contains("points"));
  EXPECT_EQ(j["layers"][1]["null_dim"], 5);
  EXPECT_EQ(j["layers"][1]["points"][0]["max_deviation_conventional"].get<double>(), 0.1);
}

TEST(GradcheckReport, Fields) {
  GradcheckSummary s;
  s.instances = 3;
  s.max_rel_sigma = 1e-9;
  s.max_rel_a = 2e-9;
  s.max_rel_b = 5e-10;
  const json j = json::parse(gradcheck_json(s, 4));
  EXPECT_EQ(j["seed"], 4);
  EXPECT_EQ(j["instances"], 3);
  EXPECT_EQ(j["max_rel_error"].get<double>(), 2e-9);
  EXPECT_TRUE(j["ste_undetached_all_zero"].get<bool>());
}

TEST(Svg, ChartsAreWellFormed) {
  const auto results = quantize_model(layers(), config(), settings(), Method::kFbquant, 1);
  for (const std::string& svg :
       {loss_curve_svg(results), svg_line_chart("t<&>", "x", "y", {{"s", {0, 1, 2}, {1, 2, 3}}}, false),
        svg_line_chart("empty", "x", "y", {}, true)}) {
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_EQ(std::count(svg.begin(), svg.end(), '<'), std::count(svg.begin(), svg.end(), '>'));
    EXPECT_EQ(svg.find("<&>"), std::string::npos);
    EXPECT_EQ(svg.find("nan"), std::string::npos);
    EXPECT_EQ(svg.find("inf"), std::string::npos);
  }
}

}  // namespace
}  // namespace fbq
