#include "vem/trace.hpp"

#include <cmath>
#include <stdexcept>

#include "vem/parallel.hpp"

namespace vem {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// 64 signs per hash: word w of column c covers rows [64 w, 64 w + 64).
std::uint64_t sign_word(std::uint64_t seed, std::uint64_t col, std::uint64_t word) {
  return splitmix64(splitmix64(splitmix64(seed) ^ col) ^ word);
}

}  // namespace

SaaEnsemble draw_saa(int n, int count, std::uint64_t seed) {
  if (n < 1 || count < 1) throw std::invalid_argument("draw_saa: n and count must be positive");
  SaaEnsemble e;
  e.seed = seed;
  e.V.resize(n, count);
  for (int c = 0; c < count; ++c) {
    for (int w = 0; w * 64 < n; ++w) {
      const std::uint64_t bits = sign_word(seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(w));
      const int hi = std::min(n, (w + 1) * 64);
      for (int r = w * 64; r < hi; ++r) e.V(r, c) = ((bits >> (r - w * 64)) & 1U) ? 1.0 : -1.0;
    }
  }
  return e;
}

SaaEnsemble truncate_saa(const SaaEnsemble& ensemble, int count) {
  if (count < 1 || count > ensemble.size()) throw std::invalid_argument("truncate_saa: count out of range");
  SaaEnsemble e;
  e.seed = ensemble.seed;
  e.mode = ensemble.mode;
  e.V = ensemble.V.leftCols(count);
  if (ensemble.presolved.size() > 0) e.presolved = ensemble.presolved.leftCols(count);
  return e;
}

std::vector<double> probe_quadratic_forms(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
                                          const Eigen::MatrixXd& probes) {
  const int s = static_cast<int>(probes.cols());
  std::vector<double> q(s);
  parallel_for(s, [&](int j) {
    const Eigen::VectorXd v = probes.col(j);
    q[j] = v.dot(apply(v));
  });
  return q;
}

double hutchinson_trace(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
                        const SaaEnsemble& ensemble) {
  const auto q = probe_quadratic_forms(apply, ensemble.V);
  double sum = 0.0;
  for (double x : q) sum += x;
  return sum / static_cast<double>(q.size());
}

double hutchinson_trace(const Eigen::MatrixXd& a, const SaaEnsemble& ensemble) {
  if (a.rows() != ensemble.dim() || a.cols() != ensemble.dim())
    throw std::invalid_argument("hutchinson_trace: dimension mismatch");
  // Column-wise v_j^T (A v_j), summed in column order.
  const Eigen::MatrixXd av = a * ensemble.V;
  double sum = 0.0;
  for (Eigen::Index j = 0; j < ensemble.size(); ++j) sum += ensemble.V.col(j).dot(av.col(j));
  return sum / static_cast<double>(ensemble.size());
}

double estimate_variance(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("estimate_variance: square matrix required");
  const Eigen::MatrixXd s = 0.5 * (a + a.transpose());
  return 2.0 * (s.squaredNorm() - s.diagonal().squaredNorm());
}

MeanSe mean_se(const std::vector<double>& xs) {
  MeanSe out;
  const double k = static_cast<double>(xs.size());
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= k;
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.var = ss / (k - 1.0);
  out.se = std::sqrt(out.var / k);
  return out;
}

}  // namespace vem
