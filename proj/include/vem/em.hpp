#pragma once

// Stochastic E functions for a Vecchia prior with diagonal noise and the EM
// iteration that minimizes them in turn.
//
// With A0 = Omega(theta0) + R(theta0)^{-1} and zhat = A0^{-1} R0^{-1} y, the
// E function at theta is
//   0.5 tr[(Omega(theta) + R(theta)^{-1}) A0^{-1}] + l_S(zhat) + l_R(y - zhat),
// where l_S is the noiseless Vecchia NLL and l_R the Gaussian NLL of the noise.
// The trace is estimated from Rademacher probes presolved against A0, or
// computed from a dense A0^{-1} in exact mode.

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vem/kernels.hpp"
#include "vem/optimize.hpp"
#include "vem/solver.hpp"
#include "vem/trace.hpp"
#include "vem/vecchia.hpp"

namespace vem {

/// A numerical failure inside an EM iteration, with the iteration in the
/// message.
class EMError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TraceMode {
  symmetrized,    // probes W0^{-T} v
  unsymmetrized,  // probes v paired with A0^{-1} v
  exact           // dense A0^{-1}
};
TraceMode parse_trace_mode(const std::string& name);
std::string trace_mode_name(TraceMode m);

struct EMConfig {
  int saa_count = 72;
  int max_iter = 30;
  double tol = 1e-4;  // on |theta_{j+1} - theta_j| in transformed coordinates
  TraceMode trace = TraceMode::symmetrized;
  SolveOptions solver;
  std::uint64_t saa_seed = 1;
  OptimizerConfig mstep;
  bool score = true;        // record the approximate marginal NLL per iteration
  bool score_dense = false; // score by dense inversion of Omega instead

  void validate() const;
};

/// Everything fixed across one fit: data, plan and model structure.
struct EMProblem {
  Locations locs;
  Eigen::VectorXd y;
  VecchiaPlan plan;
  BlockPairs pairs;
  KernelModel kernel_shape;
  NoiseModel noise_shape;

  int n() const { return static_cast<int>(y.size()); }
  int kernel_dim() const { return kernel_param_count(kernel_shape); }
  int noise_dim() const { return noise_param_count(noise_shape); }
  int dim() const { return kernel_dim() + noise_dim(); }
  std::vector<std::string> param_names() const;

  KernelModel kernel_at(const Eigen::VectorXd& theta) const;
  NoiseModel noise_at(const Eigen::VectorXd& theta) const;
};
std::shared_ptr<const EMProblem> make_em_problem(Locations locs, Eigen::VectorXd y, VecchiaPlan plan,
                                                 KernelModel kernel_shape, NoiseModel noise_shape);

/// Kernel coordinates followed by noise coordinates.
Eigen::VectorXd pack_theta(const KernelModel& kernel, const NoiseModel& noise);

struct EMHistoryRow {
  int iteration = 0;
  Eigen::VectorXd theta;
  double e_value = 0.0;     // E function minimized by this iteration's M step
  double vecchia_nll = 0.0; // approximate marginal NLL at theta (NaN if not scored)
  double seconds = 0.0;     // wall time since the fit started
  std::string mstep_status;
  int mstep_iterations = 0;
};

struct EMState {
  std::shared_ptr<const EMProblem> problem;
  int iteration = 0;
  Eigen::VectorXd theta0;
  TraceMode mode = TraceMode::symmetrized;
  Eigen::VectorXd zhat;
  SaaEnsemble ensemble;         // presolved for the current theta0 (unused in exact mode)
  Eigen::MatrixXd exact_cov;    // A0^{-1}, exact mode only
  BlockMoments moments;         // zhat zhat^T + C restricted to each block
  Eigen::VectorXd noise_moments; // C_ii + (y - zhat)_i^2
  double system_nll = 0.0;      // approximate marginal NLL at theta0 from the factored A0 (NaN for CG)
  std::vector<EMHistoryRow> history;
  bool converged = false;
  std::string status = "running";
};

/// Solve for zhat and presolve the probes at theta0. Everything that depends
/// on theta0 is computed here and frozen for the M step. The ensemble is
/// used for its raw columns only.
EMState estep_prepare(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& theta0,
                      const SaaEnsemble& ensemble, const EMConfig& config);

/// State using only the first `count` probes (nested ensembles).
EMState restrict_probes(const EMState& state, int count);

/// The three terms of the E function computed literally: the trace term
/// through Omega(theta) matvecs with the presolved probes (or dense A0^{-1}),
/// and the two NLL terms directly.
struct ETerms {
  double trace = 0.0;
  double latent = 0.0;
  double noise = 0.0;
  double total() const { return trace + latent + noise; }
};
ETerms estep_terms(const Eigen::VectorXd& theta, const EMState& state);

/// Literal E function; the state must be in the matching mode.
/// Invalid parameters give +infinity.
double estep_objective_sym(const Eigen::VectorXd& theta, const EMState& state);
double estep_objective_asym(const Eigen::VectorXd& theta, const EMState& state);
double estep_objective_exact(const Eigen::VectorXd& theta, const EMState& state);

/// The same quantity in one pass over the conditioning sets through the
/// accumulated block moments. Valid in every mode.
double estep_objective_vecchia(const Eigen::VectorXd& theta, const EMState& state);
/// Gradient of estep_objective_vecchia by dual numbers.
Eigen::VectorXd estep_gradient(const Eigen::VectorXd& theta, const EMState& state);

/// The kernel and noise parts of estep_objective_vecchia, which separate:
/// total = kernel + noise.
Objective estep_kernel_objective(const EMState& state);
Objective estep_noise_objective(const EMState& state);

struct MStepResult {
  Eigen::VectorXd theta;
  double e_start = 0.0;  // E value at theta0
  double e_value = 0.0;  // E value at theta
  std::string status;    // optimizer status of the kernel part, or "fallback"
  int iterations = 0;
  std::vector<OptTraceRow> trace;
};

/// Minimize the E function from theta0. Never returns a point with a larger
/// E value than theta0; on optimizer failure theta0 itself is returned.
MStepResult mstep(const EMState& state, const EMConfig& config);

using EMCallback = std::function<void(const EMHistoryRow&)>;

/// EM iteration from `init` until the step is below config.tol or
/// config.max_iter M steps have run.
EMState em_fit(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init, const EMConfig& config,
               const EMCallback& on_iteration = {});

/// Repeat one M step from theta0 with nested probe sets of the given sizes.
struct SaaDiagnosticRow {
  int count = 0;
  Eigen::VectorXd theta;
  double e_value = 0.0;
  std::string status;
};
std::vector<SaaDiagnosticRow> saa_diagnostic(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& theta0,
                                             const std::vector<int>& counts, const EMConfig& config);

// ---- naive Vecchia --------------------------------------------------------------

/// Vecchia NLL of y with the nugget folded into each local covariance.
double naive_vecchia_nll(const EMProblem& problem, const Eigen::VectorXd& theta);
Objective naive_vecchia_objective(std::shared_ptr<const EMProblem> problem);

struct NaiveFit {
  Eigen::VectorXd theta;
  double nll = 0.0;
  OptResult opt;
};
NaiveFit fit_naive_vecchia(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init,
                           const OptimizerConfig& config);

/// Approximate marginal NLL of y (Vecchia prior plus noise) at theta.
double approx_marginal_nll(const EMProblem& problem, const Eigen::VectorXd& theta, bool dense);

}  // namespace vem
