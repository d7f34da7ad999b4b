// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fbq {

namespace {

constexpr int kMaxSweeps = 80;

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void rotate_rows(MatrixD& m, std::size_t p, std::size_t q, double c, double s) {
  double* rp = m.row(p).data();
  double* rq = m.row(q).data();
  for (std::size_t i = 0; i < m.cols(); ++i) {
    const double xp = rp[i];
    const double xq = rq[i];
    rp[i] = c * xp - s * xq;
    rq[i] = s * xp + c * xq;
  }
}

// Hestenes one-sided Jacobi. `cols` holds the columns of the working matrix as
// rows (n x len); `vt` accumulates the right rotations (n x n, rows are the
// right singular vectors). On return the rows of `cols` are mutually
// orthogonal.
void hestenes(MatrixD& cols, MatrixD& vt, double tol) {
  const std::size_t n = cols.rows();
  const double floor_tol =
      std::numeric_limits<double>::epsilon() * std::sqrt(static_cast<double>(std::max<std::size_t>(cols.cols(), 1)));
  const double thresh = std::max(tol, floor_tol);

  double worst = 0.0;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(cols.row(p), cols.row(p));
        const double beta = dot(cols.row(q), cols.row(q));
        const double gamma = dot(cols.row(p), cols.row(q));
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off <= thresh) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_rows(cols, p, q, c, s);
        rotate_rows(vt, p, q, c, s);
        rotated = true;
      }
    }
    if (!rotated) return;
  }
  throw ConvergenceError("truncated_svd: Jacobi sweeps did not converge (max off-diagonal ratio " +
                             std::to_string(worst) + ")",
                         worst);
}

// Fills zero columns of `u` (m x k, flagged in `missing`) with unit vectors
// orthogonal to every other column.
void complete_columns(MatrixD& u, const std::vector<bool>& missing) {
  const std::size_t m = u.rows();
  const std::size_t k = u.cols();
  MatrixD ut = u.transposed();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (!missing[j]) continue;
    while (candidate < m) {
      std::vector<double> e(m, 0.0);
      e[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < k; ++i) {
          if (i == j || (missing[i] && i > j)) continue;
          const double proj = dot(ut.row(i), e);
          for (std::size_t r = 0; r < m; ++r) e[r] -= proj * ut(i, r);
        }
      }
      const double norm = std::sqrt(dot(e, e));
      if (norm > 0.5) {
        for (std::size_t r = 0; r < m; ++r) ut(j, r) = e[r] / norm;
        break;
      }
    }
  }
  u = ut.transposed();
}

}  // namespace

SvdResult truncated_svd(const MatrixD& a, std::size_t k, double tol) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (k > std::min(m, n)) {
    throw ValueError("truncated_svd: k=" + std::to_string(k) + " exceeds min(rows, cols)=" +
                     std::to_string(std::min(m, n)));
  }
  const bool tall = m >= n;
  // Work on the smaller dimension: the columns of a (tall) or of aᵀ (wide).
  MatrixD cols = tall ? a.transposed() : a;
  const std::size_t small = cols.rows();
  MatrixD vt = MatrixD::identity(small);
  hestenes(cols, vt, tol);

  std::vector<double> norms(small);
  for (std::size_t j = 0; j < small; ++j) norms[j] = std::sqrt(dot(cols.row(j), cols.row(j)));
  std::vector<std::size_t> order(small);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const std::size_t big = cols.cols();
  // left: vectors of length `big` (normalized columns), right: rows of vt.
  MatrixD left(big, k);
  MatrixD right(k, small);
  std::vector<double> s(k);
  std::vector<bool> missing(k, false);
  const double smax = small > 0 ? norms[order[0]] : 0.0;
  const double zero_cut = smax * std::numeric_limits<double>::epsilon() * static_cast<double>(big);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    s[j] = norms[src];
    for (std::size_t c = 0; c < small; ++c) right(j, c) = vt(src, c);
    if (s[j] <= zero_cut || s[j] == 0.0) {
      missing[j] = true;
      continue;
    }
    for (std::size_t r = 0; r < big; ++r) left(r, j) = cols(src, r) / s[j];
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end()) complete_columns(left, missing);

  if (tall) return {std::move(left), std::move(s), std::move(right)};
  // Decomposed aᵀ, so the roles of the two factors swap.
  return {right.transposed(), std::move(s), left.transposed()};
}

MatrixD svd_reconstruct(const SvdResult& svd) {
  MatrixD us = svd.u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t j = 0; j < us.cols(); ++j) us(r, j) *= svd.s[j];
  return matmul(us, svd.v);
}

MatrixD gram_null_basis(const MatrixD& x, double tol) {
  const std::size_t d = x.cols();
  if (d == 0) return MatrixD(0, 0);
  const MatrixD g = gram(x);
  // g is symmetric PSD, so its singular pairs are its eigenpairs.
  const SvdResult eig = truncated_svd(g, d);
  const double cut = tol * eig.s[0];
  std::vector<std::size_t> null_rows;
  for (std::size_t j = 0; j < d; ++j)
    if (eig.s[j] <= cut) null_rows.push_back(j);
  MatrixD basis(null_rows.size(), d);
  for (std::size_t i = 0; i < null_rows.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) basis(i, c) = eig.v(null_rows[i], c);
  return basis;
}

MatrixD orthonormalize_rows(const MatrixD& m, double drop_tol) {
  MatrixD out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto ri = out.row(i);
    const double orig = std::sqrt(dot(ri, ri));
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        const double proj = dot(out.row(j), ri);
        auto rj = out.row(j);
        for (std::size_t c = 0; c < ri.size(); ++c) ri[c] -= proj * rj[c];
      }
    }
    const double norm = std::sqrt(dot(ri, ri));
    if (orig == 0.0 || norm <= drop_tol * orig) {
      std::fill(ri.begin(), ri.end(), 0.0);
      continue;
    }
    for (double& v : ri) v /= norm;
  }
  return out;
}

}  // namespace fbq
