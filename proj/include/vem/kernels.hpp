#pragma once

// Covariance kernels, diagonal noise models, their log-scale
// parameterizations and the key = value parameter file format.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "vem/dual.hpp"
#include "vem/special.hpp"

namespace vem {

/// Observation locations, one row per point.
using Locations = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Knot positions along one coordinate of the locations.
struct KnotSpec {
  std::array<double, 3> knots{0.2, 0.8, 1.2};
  int dim = -1;  // coordinate index; negative counts from the end

  int resolve(int dimension) const { return dim < 0 ? dimension + dim : dim; }
};

/// Normalized inverse-distance weights of `coord` with respect to the knots.
/// A coordinate that hits a knot gets weight 1 there.
std::array<double, 3> knot_weights(const KnotSpec& spec, double coord);

template <typename T>
struct MaternIsoParamsT {
  T sigma2;
  T rho;
  T nu;
};

template <typename T>
struct AnisoKnotParamsT {
  std::array<T, 3> sigmas;
  T W11;
  T W12;
  T W22;
  T nu;
  KnotSpec knots;
};

template <typename T>
using KernelParamsT = std::variant<MaternIsoParamsT<T>, AnisoKnotParamsT<T>>;

template <typename T>
struct ConstNuggetT {
  T eta2;
};

template <typename T>
struct KnotNuggetT {
  std::array<T, 3> etas;
  KnotSpec knots;
};

template <typename T>
using NoiseParamsT = std::variant<ConstNuggetT<T>, KnotNuggetT<T>>;

using MaternIsoParams = MaternIsoParamsT<double>;
using AnisoKnotParams = AnisoKnotParamsT<double>;
using KernelModel = KernelParamsT<double>;
using NoiseDiagParams = NoiseParamsT<double>;
using NoiseModel = NoiseDiagParams;

void validate(const KernelModel& kernel);
void validate(const NoiseModel& noise);

/// Kernel evaluation with order-dependent work (Bessel setup) done once.
template <typename T>
class KernelEvaluator {
 public:
  explicit KernelEvaluator(const KernelParamsT<T>& params)
      : params_(params), matern_(std::visit([](const auto& p) { return p.nu; }, params)) {}

  /// K(x, x2) for points of the given dimension.
  T operator()(const double* x, const double* x2, int dim) const {
    using std::sqrt;
    return std::visit(
        [&](const auto& p) -> T {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, MaternIsoParamsT<T>>) {
            double r2 = 0.0;
            for (int k = 0; k < dim; ++k) {
              const double h = x[k] - x2[k];
              r2 += h * h;
            }
            if (r2 == 0.0) return p.sigma2;
            return p.sigma2 * matern_(std::sqrt(r2) / p.rho);
          } else {
            if (dim != 2) throw std::invalid_argument("anisotropic kernel requires 2-D locations");
            const int kd = p.knots.resolve(dim);
            const T s1 = knot_mix(p.sigmas, knot_weights(p.knots, x[kd]));
            const T s2 = knot_mix(p.sigmas, knot_weights(p.knots, x2[kd]));
            const double h1 = x[0] - x2[0];
            const double h2 = x[1] - x2[1];
            if (h1 == 0.0 && h2 == 0.0) return s1 * s2;
            // W = [[W11, W12], [0, W22]], distance |W^T h|
            const T a = p.W11 * h1;
            const T b = p.W12 * h1 + p.W22 * h2;
            return s1 * s2 * matern_(sqrt(a * a + b * b));
          }
        },
        params_);
  }

  /// K(x, x).
  T diag(const double* x, int dim) const {
    return std::visit(
        [&](const auto& p) -> T {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, MaternIsoParamsT<T>>) {
            return p.sigma2;
          } else {
            const T s = knot_mix(p.sigmas, knot_weights(p.knots, x[p.knots.resolve(dim)]));
            return s * s;
          }
        },
        params_);
  }

  const KernelParamsT<T>& params() const { return params_; }

 private:
  static T knot_mix(const std::array<T, 3>& v, const std::array<double, 3>& w) {
    return w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
  }

  KernelParamsT<T> params_;
  MaternCorrelation<T> matern_;
};

/// Noise variance r(x) of a diagonal noise model.
template <typename T>
T noise_variance(const NoiseParamsT<T>& noise, const double* x, int dim) {
  return std::visit(
      [&](const auto& p) -> T {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ConstNuggetT<T>>) {
          return p.eta2;
        } else {
          const auto w = knot_weights(p.knots, x[p.knots.resolve(dim)]);
          const T eta = w[0] * p.etas[0] + w[1] * p.etas[1] + w[2] * p.etas[2];
          return eta * eta;
        }
      },
      noise);
}

double kernel_eval(const KernelModel& kernel, std::span<const double> x, std::span<const double> x2);

/// Dense covariance between two location sets (locs2 defaults to locs).
Eigen::MatrixXd cov_matrix(const KernelModel& kernel, const Locations& locs,
                           const Locations* locs2 = nullptr);

/// Diagonal R together with its inverse and inverse square root.
struct NoiseDiagonal {
  Eigen::VectorXd r;
  Eigen::VectorXd r_inv;
  Eigen::VectorXd r_inv_sqrt;
};
NoiseDiagonal noise_matrix(const NoiseModel& noise, const Locations& locs);

// ---- parameterization ------------------------------------------------------
//
// Optimization runs in unconstrained coordinates: logs of every positive
// parameter, W12 as is. Kernel coordinates come first, noise second.

int kernel_param_count(const KernelModel& kernel);
int noise_param_count(const NoiseModel& noise);
std::vector<std::string> kernel_param_names(const KernelModel& kernel);
std::vector<std::string> noise_param_names(const NoiseModel& noise);

Eigen::VectorXd pack_kernel(const KernelModel& kernel);
Eigen::VectorXd pack_noise(const NoiseModel& noise);

/// Natural-scale parameter values in the order of kernel_param_names.
std::vector<double> kernel_natural_values(const KernelModel& kernel);
std::vector<double> noise_natural_values(const NoiseModel& noise);

/// Rebuild kernel parameters of scalar type T from transformed coordinates,
/// taking structure (kind, knots) from `shape`.
template <typename T>
KernelParamsT<T> unpack_kernel(std::span<const T> theta, const KernelModel& shape) {
  using std::exp;
  return std::visit(
      [&](const auto& s) -> KernelParamsT<T> {
        using P = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<P, MaternIsoParams>) {
          if (theta.size() != 3) throw std::invalid_argument("matern_iso expects 3 kernel parameters");
          return MaternIsoParamsT<T>{exp(theta[0]), exp(theta[1]), exp(theta[2])};
        } else {
          if (theta.size() != 7) throw std::invalid_argument("aniso_knot expects 7 kernel parameters");
          AnisoKnotParamsT<T> p{{exp(theta[0]), exp(theta[1]), exp(theta[2])},
                                exp(theta[3]),
                                theta[4],
                                exp(theta[5]),
                                exp(theta[6]),
                                s.knots};
          return p;
        }
      },
      shape);
}

template <typename T>
NoiseParamsT<T> unpack_noise(std::span<const T> theta, const NoiseModel& shape) {
  using std::exp;
  return std::visit(
      [&](const auto& s) -> NoiseParamsT<T> {
        using P = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<P, ConstNuggetT<double>>) {
          if (theta.size() != 1) throw std::invalid_argument("constant nugget expects 1 parameter");
          return ConstNuggetT<T>{exp(theta[0])};
        } else {
          if (theta.size() != 3) throw std::invalid_argument("knot nugget expects 3 parameters");
          return KnotNuggetT<T>{{exp(theta[0]), exp(theta[1]), exp(theta[2])}, s.knots};
        }
      },
      shape);
}

KernelModel unpack_kernel(const Eigen::VectorXd& theta, const KernelModel& shape);
NoiseModel unpack_noise(const Eigen::VectorXd& theta, const NoiseModel& shape);

// ---- parameter files ---------------------------------------------------------

/// Kernel plus optional noise, as stored in a parameter file.
struct ModelConfig {
  KernelModel kernel;
  std::optional<NoiseModel> noise;
};

/// Parse `key = value` lines; '#' starts a comment. Keys: kind, sigma2, rho,
/// nu, eta2, sigmas, etas, knots, knot_dim, W11, W12, W22. Lists are comma
/// separated.
ModelConfig parse_config(const std::string& text);
std::string format_config(const ModelConfig& config);
ModelConfig read_config(const std::string& path);
void write_config(const std::string& path, const ModelConfig& config);

/// Parse the tuple shorthand "(sigma2, rho, nu, eta2)" for an isotropic
/// Matern model with a constant nugget.
ModelConfig parse_iso_tuple(const std::string& text);

}  // namespace vem
