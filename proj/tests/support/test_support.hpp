// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <random>
#include <string>

#include "fbquant/fbcore.hpp"
#include "fbquant/linalg.hpp"

namespace fbq::testing {

inline MatrixD random_matrix(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  MatrixD m(rows, cols);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

inline MatrixD uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  MatrixD m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return m;
}

inline LayerRecord random_layer(const std::string& name, std::size_t out, std::size_t in, std::size_t n,
                                std::mt19937_64& rng) {
  return {name, random_matrix(out, in, 1.0, rng), random_matrix(n, in, 1.0, rng)};
}

inline Eigen::MatrixXd to_eigen(const MatrixD& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

inline MatrixD from_eigen(const Eigen::MatrixXd& e) {
  MatrixD m(e.rows(), e.cols());
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) m(r, c) = e(r, c);
  return m;
}

inline double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fbquant_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path file(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fbq::testing
