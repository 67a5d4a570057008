#pragma once

// Exact Gaussian process simulation and nearest-neighbour kriging.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

#include "vem/kernels.hpp"

namespace vem {

/// Independent seed for replicate `index` of a study with master seed `master`.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// n i.i.d. uniform points in the box [lower, upper].
Locations sample_locations(int n, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, std::uint64_t seed);
/// n i.i.d. uniform points in the unit cube of dimension `dim`.
Locations sample_locations(int n, int dim, std::uint64_t seed);

struct GpSample {
  Eigen::VectorXd y;  // observations z + noise
  Eigen::VectorXd z;  // latent field
};

/// z = chol(S) g1 and y = z + R^{1/2} g2 with independent standard normal
/// g1, g2 drawn in that order from one stream. Without noise y = z.
/// Throws DenseGuardError above the dense guard unless forced and
/// NotPositiveDefinite if S does not factor.
GpSample sample_gp(const KernelModel& kernel, const NoiseModel* noise, const Locations& locs, std::uint64_t seed,
                   bool force_dense = false);

struct Prediction {
  double mean = 0.0;
  double var = 0.0;  // of the latent process, nugget excluded
};

/// Indices of the k observations nearest to x (Euclidean, ties by index).
std::vector<int> nearest_neighbors(const Locations& locs, const double* x, int k);

/// Kriging of the latent process at each target row from its k nearest
/// observations: mean k^T (K + R)^{-1} y and variance K(x, x) - k^T (K + R)^{-1} k.
std::vector<Prediction> predict_nn(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                   const Eigen::VectorXd& y, const Locations& targets, int k);

}  // namespace vem
