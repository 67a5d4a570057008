#pragma once

// Vecchia approximation: point orderings, conditioning sets, blockwise
// log-likelihood pieces and the sparse factor of the implied precision.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vem/kernels.hpp"
#include "vem/parallel.hpp"
#include "vem/small_linalg.hpp"

namespace vem {

/// A local covariance matrix failed to factor. Callers inside optimizers
/// turn this into an infinite objective.
class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- orderings -------------------------------------------------------------

/// Greedy maximin ordering. The seed is the point closest to the centroid;
/// ties go to the lowest original index. O(n^2).
std::vector<int> maximin_order(const Locations& locs);

/// Lexicographic ordering by coordinates (first column major), stable in
/// the original index.
std::vector<int> coordinate_order(const Locations& locs);

/// Named ordering: "maximin", "coordinate" or "natural".
std::vector<int> make_order(const Locations& locs, const std::string& name);

// ---- conditioning plan -----------------------------------------------------

struct ConditioningMode {
  enum class Kind { nearest, chunked };
  Kind kind = Kind::nearest;
  int m = 10;  // neighbours (nearest mode)
  int b = 1;   // block size (chunked mode)
  int p = 1;   // past chunks (chunked mode)

  static ConditioningMode nearest(int m) { return {Kind::nearest, m, 1, 0}; }
  static ConditioningMode chunked(int b, int p) { return {Kind::chunked, 0, b, p}; }
  /// Every block conditions on all earlier points (exact likelihood).
  static ConditioningMode full() { return {Kind::nearest, -1, 1, 0}; }
};

struct VecchiaPlan {
  int n = 0;
  std::string ordering = "natural";
  ConditioningMode mode;
  std::vector<int> perm;          // perm[rank] = original index
  std::vector<int> block_starts;  // block j holds ranks [block_starts[j], block_starts[j+1])
  std::vector<std::vector<int>> cond_sets;  // original indices, all of earlier rank

  int num_blocks() const { return static_cast<int>(cond_sets.size()); }
  int block_size(int j) const { return block_starts[j + 1] - block_starts[j]; }
  /// Original indices of block j's local covariance: conditioning set first,
  /// then the block's own points in rank order.
  std::vector<int> local_indices(int j) const;
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
  /// Upper bound on the nonzeros of the precision factor.
  std::size_t factor_nnz_bound() const;
};

/// Build conditioning sets for points ranked by `perm`. In nearest mode
/// blocks are singletons conditioning on the m nearest earlier points
/// (ties broken by rank); m < 0 means all earlier points. In chunked mode
/// blocks of b consecutive ranks condition on the previous p blocks.
VecchiaPlan build_conditioning(const Locations& locs, const std::vector<int>& perm, ConditioningMode mode,
                               const std::string& ordering_name = "custom");

/// k nearest earlier-ranked neighbours for each rank, by brute force. Ties
/// are broken by rank. Exposed for testing the tree search.
std::vector<std::vector<int>> nearest_earlier_bruteforce(const Locations& locs, const std::vector<int>& perm, int k);
/// Same result through batched k-d trees.
std::vector<std::vector<int>> nearest_earlier_kdtree(const Locations& locs, const std::vector<int>& perm, int k);

std::string format_plan(const VecchiaPlan& plan);
VecchiaPlan parse_plan(const std::string& text);
void write_plan(const std::string& path, const VecchiaPlan& plan);
VecchiaPlan read_plan(const std::string& path);

// ---- blockwise likelihood --------------------------------------------------

/// det = sum_j log|D_j|, qf = sum_j |D_j^{-1/2}(u_j - B_j u_sigma(j))|^2.
template <typename T>
struct VecchiaParts {
  T det;
  T qf;
};

/// Per-block second-moment matrices in local index order.
using BlockMoments = std::vector<Eigen::MatrixXd>;

/// Distinct off-diagonal point pairs over all local covariances, so each
/// kernel value is computed once per evaluation. Neighbouring blocks share
/// most of their pairs.
struct BlockPairs {
  std::vector<std::pair<int, int>> pairs;  // original indices
  // Per block, the pair id of local entry (a, c), c < a, in row-major order
  // of the strict lower triangle.
  std::vector<std::vector<int>> entries;
};
BlockPairs build_block_pairs(const VecchiaPlan& plan);

namespace detail {

[[noreturn]] void report_block_failure(const Locations& locs, const std::vector<int>& idx, int block);

/// Factor block j's local covariance (kernel plus optional nugget) into
/// `chol`. Throws NotPositiveDefinite with a diagnostic on failure.
template <typename T>
void local_cholesky(const KernelEvaluator<T>& kernel, const NoiseParamsT<T>* nugget, const Locations& locs,
                    const std::vector<int>& idx, int block, std::vector<T>& chol) {
  const int s = static_cast<int>(idx.size());
  const int dim = static_cast<int>(locs.cols());
  chol.assign(static_cast<std::size_t>(s) * s, T(0.0));
  for (int a = 0; a < s; ++a) {
    const double* xa = locs.row(idx[a]).data();
    for (int c = 0; c < a; ++c) chol[static_cast<std::size_t>(a) * s + c] = kernel(xa, locs.row(idx[c]).data(), dim);
    T d = kernel.diag(xa, dim);
    if (nugget) d += noise_variance(*nugget, xa, dim);
    chol[static_cast<std::size_t>(a) * s + a] = d;
  }
  if (!small::cholesky(chol, s)) report_block_failure(locs, idx, block);
}

/// Same as local_cholesky with off-diagonal kernel values taken from
/// `values`, indexed through the block's pair entries.
template <typename T>
void local_cholesky_cached(const KernelEvaluator<T>& kernel, const NoiseParamsT<T>* nugget, const Locations& locs,
                           const std::vector<int>& idx, int block, const std::vector<int>& entries,
                           const std::vector<T>& values, std::vector<T>& chol) {
  const int s = static_cast<int>(idx.size());
  const int dim = static_cast<int>(locs.cols());
  chol.assign(static_cast<std::size_t>(s) * s, T(0.0));
  std::size_t e = 0;
  for (int a = 0; a < s; ++a) {
    const double* xa = locs.row(idx[a]).data();
    for (int c = 0; c < a; ++c) chol[static_cast<std::size_t>(a) * s + c] = values[entries[e++]];
    T d = kernel.diag(xa, dim);
    if (nugget) d += noise_variance(*nugget, xa, dim);
    chol[static_cast<std::size_t>(a) * s + a] = d;
  }
  if (!small::cholesky(chol, s)) report_block_failure(locs, idx, block);
}

/// Kernel values of all distinct pairs.
template <typename T>
std::vector<T> pair_values(const KernelEvaluator<T>& kernel, const Locations& locs, const BlockPairs& pairs) {
  const int np = static_cast<int>(pairs.pairs.size());
  const int dim = static_cast<int>(locs.cols());
  std::vector<T> out(np);
  constexpr int kChunk = 1024;
  parallel_for((np + kChunk - 1) / kChunk, [&](int c) {
    const int hi = std::min(np, (c + 1) * kChunk);
    for (int i = c * kChunk; i < hi; ++i) {
      const auto [a, b] = pairs.pairs[i];
      out[i] = kernel(locs.row(a).data(), locs.row(b).data(), dim);
    }
  });
  return out;
}

template <typename T>
T sum_in_order(const std::vector<T>& parts) {
  T total(0.0);
  for (const auto& x : parts) total += x;
  return total;
}

}  // namespace detail

/// Blockwise det and quadratic-form sums for the vector u (original order).
/// With `nugget` set, the noise variance is folded into every local
/// covariance (naive Vecchia).
template <typename T>
VecchiaParts<T> vecchia_nll_parts(const KernelParamsT<T>& kernel, const NoiseParamsT<T>* nugget,
                                  const VecchiaPlan& plan, const Locations& locs, const Eigen::VectorXd& u,
                                  const BlockPairs* pairs = nullptr) {
  if (u.size() != plan.n || locs.rows() != plan.n) throw std::invalid_argument("vecchia_nll_parts: size mismatch");
  const KernelEvaluator<T> eval(kernel);
  std::vector<T> values;
  if (pairs) values = detail::pair_values(eval, locs, *pairs);
  const int nb = plan.num_blocks();
  std::vector<T> det(nb, T(0.0)), qf(nb, T(0.0));
  parallel_for(nb, [&](int j) {
    using std::log;
    const auto idx = plan.local_indices(j);
    const int s = static_cast<int>(idx.size());
    const int k = s - plan.block_size(j);
    std::vector<T> chol;
    if (pairs)
      detail::local_cholesky_cached(eval, nugget, locs, idx, j, pairs->entries[j], values, chol);
    else
      detail::local_cholesky(eval, nugget, locs, idx, j, chol);
    std::vector<T> z(s);
    for (int a = 0; a < s; ++a) z[a] = T(u(idx[a]));
    small::forward_solve(chol, s, z);
    T dj(0.0), qj(0.0);
    for (int a = k; a < s; ++a) {
      dj += 2.0 * log(chol[static_cast<std::size_t>(a) * s + a]);
      qj += z[a] * z[a];
    }
    det[j] = dj;
    qf[j] = qj;
  });
  return {detail::sum_in_order(det), detail::sum_in_order(qf)};
}

/// det as above and, in place of the quadratic form, sum_j sum_w w^T M_j w
/// over the factor rows w of block j. With M_j = u u^T restricted to the
/// block this reproduces the quadratic form of u; sums of outer products give
/// sums of quadratic forms at the cost of a single pass.
template <typename T>
VecchiaParts<T> vecchia_moment_parts(const KernelParamsT<T>& kernel, const VecchiaPlan& plan, const Locations& locs,
                                     const BlockMoments& moments, const BlockPairs* pairs = nullptr) {
  if (static_cast<int>(moments.size()) != plan.num_blocks())
    throw std::invalid_argument("vecchia_moment_parts: one moment matrix per block required");
  const KernelEvaluator<T> eval(kernel);
  std::vector<T> values;
  if (pairs) values = detail::pair_values(eval, locs, *pairs);
  const int nb = plan.num_blocks();
  std::vector<T> det(nb, T(0.0)), qf(nb, T(0.0));
  parallel_for(nb, [&](int j) {
    using std::log;
    const auto idx = plan.local_indices(j);
    const int s = static_cast<int>(idx.size());
    const int k = s - plan.block_size(j);
    const Eigen::MatrixXd& m = moments[j];
    std::vector<T> chol;
    if (pairs)
      detail::local_cholesky_cached<T>(eval, nullptr, locs, idx, j, pairs->entries[j], values, chol);
    else
      detail::local_cholesky<T>(eval, nullptr, locs, idx, j, chol);
    std::vector<T> w(s);
    T dj(0.0), qj(0.0);
    for (int r = k; r < s; ++r) {
      dj += 2.0 * log(chol[static_cast<std::size_t>(r) * s + r]);
      small::inverse_row(chol, s, r, w);
      for (int a = 0; a <= r; ++a) {
        T t = m(a, a) * w[a];
        for (int c = 0; c < a; ++c) t += 2.0 * m(a, c) * w[c];
        qj += w[a] * t;
      }
    }
    det[j] = dj;
    qf[j] = qj;
  });
  return {detail::sum_in_order(det), detail::sum_in_order(qf)};
}

/// Double-precision convenience wrappers.
VecchiaParts<double> vecchia_nll_parts(const KernelModel& kernel, const NoiseModel* nugget, const VecchiaPlan& plan,
                                       const Locations& locs, const Eigen::VectorXd& u);
/// 0.5 (det + qf + n log 2 pi).
double vecchia_nll(const KernelModel& kernel, const NoiseModel* nugget, const VecchiaPlan& plan,
                   const Locations& locs, const Eigen::VectorXd& u);

/// Accumulate weight * sym(a b^T) restricted to each block's local indices.
/// Columns of `a` and `b` are paired; pass the same matrix twice for sums
/// of squares.
void add_block_moments(const VecchiaPlan& plan, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double weight,
                       BlockMoments& moments);
/// Accumulate weight * C[loc, loc] for a dense symmetric C.
void add_block_submatrices(const VecchiaPlan& plan, const Eigen::MatrixXd& c, double weight, BlockMoments& moments);
BlockMoments zero_block_moments(const VecchiaPlan& plan);

// ---- sparse precision factor ----------------------------------------------

/// Omega = U^T U. Row r of U belongs to the point of rank r; columns use
/// original indices, so U is upper triangular after permuting its columns by
/// the plan's ordering. The lower factor L of Omega = L L^T is U^T.
struct SparsePrecisionFactor {
  int n = 0;
  Eigen::SparseMatrix<double, Eigen::RowMajor> U;
  std::vector<double> block_logdet;  // log|D_j|

  /// log|Omega| = -sum_j log|D_j|.
  double logdet_precision() const;
  Eigen::SparseMatrix<double> lower() const { return U.transpose(); }
  /// Omega assembled as a sparse matrix in original order.
  Eigen::SparseMatrix<double> precision() const;
};

SparsePrecisionFactor assemble_precision_factor(const KernelModel& kernel, const VecchiaPlan& plan,
                                                const Locations& locs);

/// Omega u = U^T (U u).
Eigen::VectorXd precision_matvec(const SparsePrecisionFactor& factor, const Eigen::VectorXd& u);

}  // namespace vem
