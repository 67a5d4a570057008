#include "vem/simulate.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <random>
#include <stdexcept>

#include "vem/parallel.hpp"
#include "vem/solver.hpp"
#include "vem/vecchia.hpp"

namespace vem {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Locations sample_locations(int n, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_locations: n must be positive");
  if (lower.size() != upper.size() || lower.size() < 1) throw std::invalid_argument("sample_locations: bad bounds");
  if (!((upper - lower).array() > 0.0).all()) throw std::invalid_argument("sample_locations: empty domain");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Locations x(n, lower.size());
  for (int i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < lower.size(); ++k) x(i, k) = lower(k) + (upper(k) - lower(k)) * unif(rng);
  return x;
}

Locations sample_locations(int n, int dim, std::uint64_t seed) {
  return sample_locations(n, Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim), seed);
}

GpSample sample_gp(const KernelModel& kernel, const NoiseModel* noise, const Locations& locs, std::uint64_t seed,
                   bool force_dense) {
  const Eigen::Index n = locs.rows();
  check_dense_size(n, 2, force_dense);
  const Eigen::LLT<Eigen::MatrixXd> llt(cov_matrix(kernel, locs));
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefinite("sample_gp: covariance matrix is not positive definite (coincident locations?)");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::VectorXd g1(n), g2(n);
  for (Eigen::Index i = 0; i < n; ++i) g1(i) = g(rng);
  for (Eigen::Index i = 0; i < n; ++i) g2(i) = g(rng);
  GpSample out;
  out.z = llt.matrixL() * g1;
  out.y = out.z;
  if (noise) out.y += noise_matrix(*noise, locs).r.cwiseSqrt().cwiseProduct(g2);
  return out;
}

std::vector<int> nearest_neighbors(const Locations& locs, const double* x, int k) {
  const int n = static_cast<int>(locs.rows());
  if (k < 1 || k > n) throw std::invalid_argument("nearest_neighbors: k must be in [1, n]");
  std::vector<double> d2(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < locs.cols(); ++c) {
      const double h = locs(i, c) - x[c];
      s += h * h;
    }
    d2[i] = s;
  }
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto closer = [&](int a, int b) { return d2[a] < d2[b] || (d2[a] == d2[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), closer);
  idx.resize(k);
  return idx;
}

std::vector<Prediction> predict_nn(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                   const Eigen::VectorXd& y, const Locations& targets, int k) {
  if (y.size() != locs.rows()) throw std::invalid_argument("predict_nn: data size mismatch");
  if (targets.cols() != locs.cols()) throw std::invalid_argument("predict_nn: target dimension mismatch");
  const int m = static_cast<int>(targets.rows());
  std::vector<Prediction> out(m);
  parallel_for(m, [&](int t) {
    const double* x = targets.row(t).data();
    const std::vector<int> nb = nearest_neighbors(locs, x, k);
    Locations sub(k, locs.cols());
    Eigen::VectorXd ysub(k);
    for (int i = 0; i < k; ++i) {
      sub.row(i) = locs.row(nb[i]);
      ysub(i) = y(nb[i]);
    }
    Eigen::MatrixXd c = cov_matrix(kernel, sub);
    c.diagonal() += noise_matrix(noise, sub).r;
    const Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite("predict_nn: neighbour covariance is singular");
    Locations xt(1, locs.cols());
    xt.row(0) = targets.row(t);
    const Eigen::VectorXd kx = cov_matrix(kernel, sub, &xt).col(0);
    const Eigen::VectorXd w = llt.solve(kx);
    const std::span<const double> xs(x, static_cast<std::size_t>(locs.cols()));
    out[t].mean = w.dot(ysub);
    out[t].var = kernel_eval(kernel, xs, xs) - kx.dot(w);
  });
  return out;
}

}  // namespace vem
