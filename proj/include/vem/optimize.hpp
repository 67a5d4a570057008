#pragma once

// Unconstrained local minimization: trust-region Newton and BFGS, with
// derivatives from dual numbers or central finite differences.

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "vem/dual.hpp"

namespace vem {

enum class OptMethod { newton_trust_region, bfgs };
enum class GradMode { dual, finite_diff };
OptMethod parse_opt_method(const std::string& name);
GradMode parse_grad_mode(const std::string& name);
std::string method_name(OptMethod m);
std::string grad_mode_name(GradMode g);

struct OptimizerConfig {
  OptMethod method = OptMethod::newton_trust_region;
  GradMode grad_mode = GradMode::dual;
  int max_evals = 500;  // objective evaluations of any order
  int max_iter = 200;
  double grad_tol = 1e-6;   // max-norm of the gradient
  double step_tol = 1e-10;  // norm of the last accepted step
  double init_radius = 1.0;
  double max_radius = 10.0;
  double accept_ratio = 1e-4;  // trust-region acceptance threshold
  double armijo = 1e-4;        // BFGS sufficient decrease
};

/// Objective with optional derivative callbacks. `value` must always be set.
/// Evaluations that throw a runtime or domain error count as +infinity.
struct Objective {
  int dim = 0;
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)> gradient;
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd&)> hessian;
};

enum class OptStatus { converged_gradient, converged_step, converged_function, max_evals, max_iter, failed };
std::string status_name(OptStatus s);
inline bool converged(OptStatus s) {
  return s == OptStatus::converged_gradient || s == OptStatus::converged_step || s == OptStatus::converged_function;
}

struct OptTraceRow {
  int iteration = 0;
  int evals = 0;
  double f = 0.0;
  double grad_norm = 0.0;
  double step_norm = 0.0;
};

struct OptResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  OptStatus status = OptStatus::failed;
  int iterations = 0;
  int evals = 0;
  std::vector<OptTraceRow> trace;  // one row per accepted iterate, the start included
};

/// Minimize from x0. Throws std::domain_error if the objective is not finite
/// at x0. Every accepted iterate strictly decreases f.
OptResult minimize(const Objective& objective, const Eigen::VectorXd& x0, const OptimizerConfig& config);

/// Central differences with h_i = max(1e-6, 1e-6 |x_i|).
Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x);
/// Central second differences with h_i = max(1e-4, 1e-4 |x_i|).
Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x);

/// Evaluate f, mapping runtime and domain errors and non-finite values to +inf.
double safe_value(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x);

// ---- dual-number objectives -----------------------------------------------------

/// Wrap a generic callable f(std::span<const T>) -> T into an Objective with
/// exact gradients (Dual) and Hessians (nested Dual) for dimension N.
template <int N, typename F>
Objective make_dual_objective(F f) {
  Objective obj;
  obj.dim = N;
  obj.value = [f](const Eigen::VectorXd& x) {
    std::array<double, N> a;
    for (int i = 0; i < N; ++i) a[i] = x(i);
    return static_cast<double>(f(std::span<const double>(a)));
  };
  obj.gradient = [f](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    using G = Grad<N>;
    std::array<G, N> a;
    for (int i = 0; i < N; ++i) a[i] = seed<G>(x(i), i);
    const G r = f(std::span<const G>(a));
    g.resize(N);
    for (int i = 0; i < N; ++i) g(i) = r.d[i];
    return r.v;
  };
  obj.hessian = [f](const Eigen::VectorXd& x, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
    using H = Hess<N>;
    std::array<H, N> a;
    for (int i = 0; i < N; ++i) a[i] = seed<H>(x(i), i);
    const H r = f(std::span<const H>(a));
    g.resize(N);
    h.resize(N, N);
    for (int i = 0; i < N; ++i) {
      g(i) = r.v.d[i];
      for (int j = 0; j < N; ++j) h(i, j) = r.d[i].d[j];
    }
    return r.v.v;
  };
  return obj;
}

/// Call fn(std::integral_constant<int, N>{}) for the runtime dimension.
/// Parameter counts of the supported models are 1 to 10.
template <typename Fn>
decltype(auto) dispatch_dim(int dim, Fn&& fn) {
  switch (dim) {
    case 1:
      return fn(std::integral_constant<int, 1>{});
    case 2:
      return fn(std::integral_constant<int, 2>{});
    case 3:
      return fn(std::integral_constant<int, 3>{});
    case 4:
      return fn(std::integral_constant<int, 4>{});
    case 6:
      return fn(std::integral_constant<int, 6>{});
    case 7:
      return fn(std::integral_constant<int, 7>{});
    case 8:
      return fn(std::integral_constant<int, 8>{});
    case 10:
      return fn(std::integral_constant<int, 10>{});
    default:
      throw std::invalid_argument("unsupported parameter count " + std::to_string(dim));
  }
}

/// Same as dispatch_dim restricted to the listed dimensions, to limit
/// template instantiations.
template <int First, int... Rest, typename Fn>
auto dispatch_dim_in(int dim, Fn&& fn) -> decltype(fn(std::integral_constant<int, First>{})) {
  if (dim == First) return fn(std::integral_constant<int, First>{});
  if constexpr (sizeof...(Rest) > 0)
    return dispatch_dim_in<Rest...>(dim, std::forward<Fn>(fn));
  else
    throw std::invalid_argument("unsupported parameter count " + std::to_string(dim));
}

/// Replace the derivative callbacks by finite differences of `value`.
Objective finite_difference_objective(const Objective& objective);

}  // namespace vem
