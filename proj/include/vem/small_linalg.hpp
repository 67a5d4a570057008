#pragma once

// Dense kernels for the small per-block matrices of the Vecchia
// approximation, templated on the scalar so they differentiate.
// Matrices are row-major in a flat vector.

#include <cmath>
#include <vector>

#include "vem/dual.hpp"

namespace vem::small {

/// In-place lower Cholesky factor of an n x n SPD matrix; the upper
/// triangle is left untouched. Returns false on a non-positive pivot.
template <typename T>
bool cholesky(std::vector<T>& a, int n) {
  using std::sqrt;
  for (int j = 0; j < n; ++j) {
    T* rj = a.data() + static_cast<std::size_t>(j) * n;
    T diag = rj[j];
    for (int k = 0; k < j; ++k) diag -= rj[k] * rj[k];
    const double dv = value_of(diag);
    if (!(dv > 0.0) || !std::isfinite(dv)) return false;
    const T ljj = sqrt(diag);
    rj[j] = ljj;
    const T inv = 1.0 / ljj;
    for (int i = j + 1; i < n; ++i) {
      T* ri = a.data() + static_cast<std::size_t>(i) * n;
      T s = ri[j];
      for (int k = 0; k < j; ++k) s -= ri[k] * rj[k];
      ri[j] = s * inv;
    }
  }
  return true;
}

/// Solve L z = b in place (b has length n).
template <typename T, typename B>
void forward_solve(const std::vector<T>& l, int n, std::vector<B>& b) {
  for (int i = 0; i < n; ++i) {
    const T* ri = l.data() + static_cast<std::size_t>(i) * n;
    B s = b[i];
    for (int k = 0; k < i; ++k) s -= ri[k] * b[k];
    b[i] = s / ri[i];
  }
}

/// Row r of L^{-1}: solves L^T w = e_r. Entries beyond r are zero and are
/// not written; w must have length >= r + 1.
template <typename T>
void inverse_row(const std::vector<T>& l, int n, int r, std::vector<T>& w) {
  w[r] = 1.0 / l[static_cast<std::size_t>(r) * n + r];
  for (int k = r - 1; k >= 0; --k) {
    T s(0.0);
    for (int i = k + 1; i <= r; ++i) s += l[static_cast<std::size_t>(i) * n + k] * w[i];
    w[k] = -s / l[static_cast<std::size_t>(k) * n + k];
  }
}

}  // namespace vem::small
