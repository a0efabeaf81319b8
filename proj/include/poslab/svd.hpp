#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "poslab/matrix.hpp"

namespace poslab {

struct SvdResult {
  Matrix u;               // m x r, orthonormal columns
  std::vector<double> s;  // r, non-negative, descending
  Matrix v;               // n x r, orthonormal columns
};

namespace detail {

// One-sided Jacobi (Hestenes) on the columns of `a` (m >= n assumed by the
// caller). Rotates column pairs until all are mutually orthogonal, then
// reads singular values off the column norms. Internally works on the
// transpose so every rotation touches contiguous memory. Plenty for the
// matrix sizes here (<= 512x64).
inline SvdResult jacobi_svd_tall(const Matrix& a) {
  const int m = a.rows, n = a.cols;
  Matrix w = transpose(a);            // row j holds column j of a
  Matrix vt = Matrix::identity(n);    // row j holds column j of V
  const double tol = 1e-14;
  const int max_sweeps = 60;

  auto row = [&](Matrix& mat, int j) { return &mat.data[static_cast<size_t>(j) * mat.cols]; };
  auto row_dot = [&](int p, int q) {
    const double* rp = row(w, p);
    const double* rq = row(w, q);
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += rp[i] * rq[i];
    return s;
  };

  std::vector<double> norms(n);
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int j = 0; j < n; ++j) norms[j] = row_dot(j, j);
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double alpha = norms[p];
        double beta = norms[q];
        double gamma = row_dot(p, q);
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        double* wp = row(w, p);
        double* wq = row(w, q);
        for (int i = 0; i < m; ++i) {
          double ap = wp[i], aq = wq[i];
          wp[i] = c * ap - s * aq;
          wq[i] = s * ap + c * aq;
        }
        double* vp = row(vt, p);
        double* vq = row(vt, q);
        for (int i = 0; i < n; ++i) {
          double ap = vp[i], aq = vq[i];
          vp[i] = c * ap - s * aq;
          vq[i] = s * ap + c * aq;
        }
        norms[p] = c * c * alpha + s * s * beta - 2.0 * c * s * gamma;
        norms[q] = s * s * alpha + c * c * beta + 2.0 * c * s * gamma;
      }
    }
    if (!rotated) break;
  }
  if (sweep == max_sweeps)
    throw std::runtime_error("svd: no convergence after 60 sweeps");

  std::vector<double> sv(n);
  for (int j = 0; j < n; ++j) sv[j] = std::sqrt(row_dot(j, j));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return sv[x] > sv[y]; });

  SvdResult res;
  res.s.resize(n);
  res.u = Matrix(m, n);
  res.v = Matrix(n, n);
  for (int j = 0; j < n; ++j) {
    int src = order[j];
    res.s[j] = sv[src];
    const double* wr = row(w, src);
    if (sv[src] > 0.0)
      for (int i = 0; i < m; ++i) res.u.at(i, j) = wr[i] / sv[src];
    const double* vr = row(vt, src);
    for (int i = 0; i < n; ++i) res.v.at(i, j) = vr[i];
  }

  // Null columns of U (zero singular values) are completed to an
  // orthonormal basis so U^T U = I holds for rank-deficient inputs too.
  for (int j = 0; j < n; ++j) {
    if (res.s[j] > 0.0) continue;
    for (int cand = 0; cand < m; ++cand) {
      Matrix e(m, 1);
      e.at(cand, 0) = 1.0;
      for (int k = 0; k < n; ++k) {
        if (k == j) continue;
        double proj = 0.0;
        for (int i = 0; i < m; ++i) proj += e.at(i, 0) * res.u.at(i, k);
        for (int i = 0; i < m; ++i) e.at(i, 0) -= proj * res.u.at(i, k);
      }
      double norm = std::sqrt(frobenius_sq(e));
      if (norm > 1e-6) {
        for (int i = 0; i < m; ++i) res.u.at(i, j) = e.at(i, 0) / norm;
        break;
      }
    }
  }
  return res;
}

}  // namespace detail

// Thin SVD: a = U diag(S) V^T with r = min(rows, cols) columns.
inline SvdResult svd(const Matrix& a) {
  ensure_finite(a, "svd input");
  if (a.rows == 0 || a.cols == 0) throw std::invalid_argument("svd: empty matrix");
  if (a.rows >= a.cols) return detail::jacobi_svd_tall(a);
  SvdResult t = detail::jacobi_svd_tall(transpose(a));
  SvdResult r;
  r.u = std::move(t.v);
  r.v = std::move(t.u);
  r.s = std::move(t.s);
  return r;
}

inline Matrix svd_reconstruct(const SvdResult& r) {
  Matrix us = r.u;
  for (int j = 0; j < us.cols; ++j)
    for (int i = 0; i < us.rows; ++i) us.at(i, j) *= r.s[j];
  return matmul_nt(us, r.v);
}

}  // namespace poslab
