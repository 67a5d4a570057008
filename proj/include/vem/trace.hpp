#pragma once

// Rademacher probe ensembles and Hutchinson trace estimates.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

namespace vem {

/// How the probe columns were presolved against A(theta0) = W W^T.
enum class ProbeMode {
  raw,          // V only
  symmetrized,  // presolved = W^{-T} V
  unsymmetrized // presolved = A^{-1} V
};

struct SaaEnsemble {
  Eigen::MatrixXd V;  // n x S, entries +-1
  std::uint64_t seed = 0;
  ProbeMode mode = ProbeMode::raw;
  Eigen::MatrixXd presolved;  // empty while mode is raw

  Eigen::Index size() const { return V.cols(); }
  Eigen::Index dim() const { return V.rows(); }
};

/// Entry (row, col) is a pure function of (seed, col, row), so ensembles
/// with more columns extend smaller ones drawn from the same seed.
SaaEnsemble draw_saa(int n, int count, std::uint64_t seed);

/// The first `count` columns of an ensemble (presolved columns included).
SaaEnsemble truncate_saa(const SaaEnsemble& ensemble, int count);

/// Per-probe quadratic forms v_j^T A v_j.
std::vector<double> probe_quadratic_forms(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
                                          const Eigen::MatrixXd& probes);

/// S^{-1} sum_j v_j^T A v_j.
double hutchinson_trace(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
                        const SaaEnsemble& ensemble);
double hutchinson_trace(const Eigen::MatrixXd& a, const SaaEnsemble& ensemble);

/// Variance of v^T A v for one Rademacher probe: 2 (|A|_F^2 - sum_j A_jj^2)
/// for symmetric A. The symmetric part is used otherwise.
double estimate_variance(const Eigen::MatrixXd& a);

/// Sample mean and its standard error.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  double var = 0.0;  // sample variance
};
MeanSe mean_se(const std::vector<double>& xs);

}  // namespace vem
