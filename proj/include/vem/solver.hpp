#pragma once

// Dense reference computations (exact likelihoods, conditional laws, the
// exact E function) and solves with A = Omega + R^{-1} by Cholesky or by
// conjugate gradients.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "vem/kernels.hpp"
#include "vem/vecchia.hpp"

namespace vem {

enum class Backend { dense, sparse, cg };
Backend parse_backend(const std::string& name);
std::string backend_name(Backend b);

struct SolveOptions {
  Backend backend = Backend::sparse;
  double cg_tol = 1e-10;  // relative residual
  int cg_maxit = 2000;
};

/// CG stopped without reaching the requested residual.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense work requested above the size guard.
class DenseGuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Default dense guard; larger problems need an explicit override.
inline constexpr int kDenseGuard = 20000;
/// Throws DenseGuardError if n exceeds the guard or the matrices would not
/// fit in available memory, unless forced.
void check_dense_size(Eigen::Index n, int copies, bool force);

/// Symmetric factorization A = W W^T with log|A|. Dense Cholesky, or sparse
/// Cholesky with an AMD fill-reducing permutation (W = P^T L).
class FactorHandle {
 public:
  static FactorHandle dense(const Eigen::MatrixXd& a);
  static FactorHandle sparse(const Eigen::SparseMatrix<double>& a);

  Eigen::Index size() const { return n_; }
  double logdet() const { return logdet_; }
  bool is_sparse() const { return sparse_ != nullptr; }
  /// Nonzeros of the triangular factor.
  Eigen::Index factor_nonzeros() const;

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;
  /// W^{-T} v, the half solve used to symmetrize trace estimates.
  Eigen::MatrixXd half_solve(const Eigen::MatrixXd& v) const;
  /// W^T u.
  Eigen::MatrixXd apply_wt(const Eigen::MatrixXd& u) const;
  /// W u.
  Eigen::MatrixXd apply_w(const Eigen::MatrixXd& u) const;

 private:
  using SparseLLT = Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>>;
  Eigen::Index n_ = 0;
  double logdet_ = 0.0;
  std::shared_ptr<const Eigen::LLT<Eigen::MatrixXd>> dense_;
  std::shared_ptr<const SparseLLT> sparse_;
};

/// 0.5 (log|A| + u^T A^{-1} u + n log 2 pi).
double gaussian_nll(const FactorHandle& a, const Eigen::VectorXd& u);

// ---- conjugate gradients ----------------------------------------------------

struct CgResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double rel_residual = 0.0;
};

using LinearOperator = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Jacobi-preconditioned CG. `diag` may be empty for no preconditioning.
/// `on_iterate`, when set, receives each iterate (used by tests).
/// Throws SolverError on breakdown or when maxit is reached.
CgResult conjugate_gradient(const LinearOperator& apply, const Eigen::VectorXd& diag, const Eigen::VectorXd& b,
                            double tol, int maxit,
                            const std::function<void(const Eigen::VectorXd&)>& on_iterate = {});

/// Solve A x = b for SPD A with the chosen backend.
Eigen::VectorXd solve_spd(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const SolveOptions& opts);
Eigen::VectorXd solve_spd(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, const SolveOptions& opts);
/// Matrix-free form; only the CG backend applies.
Eigen::VectorXd solve_spd(const LinearOperator& apply, const Eigen::VectorXd& diag, const Eigen::VectorXd& b,
                          const SolveOptions& opts);

// ---- A = Omega + R^{-1} ---------------------------------------------------------

/// The posterior precision of the latent field under a Vecchia prior.
/// Cholesky backends factor A once; the CG backend works matrix free.
class PrecisionSystem {
 public:
  PrecisionSystem(SparsePrecisionFactor omega, Eigen::VectorXd r_inv, const SolveOptions& opts);

  Eigen::Index size() const { return r_inv_.size(); }
  const SolveOptions& options() const { return opts_; }
  const SparsePrecisionFactor& omega() const { return omega_; }
  const Eigen::VectorXd& r_inv() const { return r_inv_; }

  Eigen::VectorXd apply(const Eigen::VectorXd& u) const;
  Eigen::SparseMatrix<double> assembled() const;
  /// A^{-1} b with the configured backend. CG statistics are recorded.
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  /// Column-wise solves; columns run concurrently.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;

  bool has_factor() const { return factor_.has_value(); }
  /// Requires a Cholesky backend.
  const FactorHandle& factor() const;
  /// W^{-T} v for A = W W^T. Requires a Cholesky backend.
  Eigen::MatrixXd half_solve(const Eigen::MatrixXd& v) const;
  /// Dense A^{-1}, for exact traces at small n.
  Eigen::MatrixXd dense_inverse() const;

  int last_cg_iterations() const { return cg_iters_; }
  double last_cg_residual() const { return cg_resid_; }

 private:
  SparsePrecisionFactor omega_;
  Eigen::VectorXd r_inv_;
  Eigen::VectorXd diag_;  // diagonal of A, for Jacobi preconditioning
  SolveOptions opts_;
  std::optional<FactorHandle> factor_;
  mutable int cg_iters_ = 0;
  mutable double cg_resid_ = 0.0;
};

/// Build A(theta0) for the given model, plan and backend.
PrecisionSystem make_precision_system(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan,
                                      const Locations& locs, const SolveOptions& opts);

/// Approximate marginal NLL 0.5 (log|Omega^{-1} + R| + y^T (Omega^{-1} + R)^{-1} y + n log 2 pi)
/// from a factored A, through log|Omega^{-1}+R| = log|A| - log|Omega| + log|R|
/// and (Omega^{-1}+R)^{-1} = R^{-1} - R^{-1} A^{-1} R^{-1}.
double approx_nll(const PrecisionSystem& system, const Eigen::VectorXd& y);
double approx_nll(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan, const Locations& locs,
                  const Eigen::VectorXd& y, Backend backend = Backend::sparse);
/// Same quantity by dense inversion of the assembled Omega.
double approx_nll_dense(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan,
                        const Locations& locs, const Eigen::VectorXd& y);

// ---- dense oracle -------------------------------------------------------------

/// S + R as a dense matrix (noise optional).
Eigen::MatrixXd dense_covariance(const KernelModel& kernel, const NoiseModel* noise, const Locations& locs);

/// Exact marginal NLL 0.5 (log|S+R| + y^T (S+R)^{-1} y + n log 2 pi).
double exact_nll(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs, const Eigen::VectorXd& y,
                 bool force_dense = false);

/// Conditional mean E[z | y] = (S^{-1} + R^{-1})^{-1} R^{-1} y. The dense
/// backend uses the true S through S (S+R)^{-1} y; other backends replace
/// S^{-1} by the Vecchia precision of `plan`.
Eigen::VectorXd conditional_mean(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                 const Eigen::VectorXd& y, const VecchiaPlan* plan, const SolveOptions& opts);

/// Exact dense conditional law of z | y: mean and covariance (S^{-1}+R^{-1})^{-1}.
struct ConditionalLaw {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
ConditionalLaw exact_conditional(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                 const Eigen::VectorXd& y);

/// Exact E function at theta given theta0:
/// 0.5 tr[(S^{-1}+R^{-1})(S0^{-1}+R0^{-1})^{-1}] + l_S(zhat) + l_R(y - zhat).
struct EFunctionTerms {
  double trace = 0.0;  // 0.5 tr[...]
  double latent = 0.0; // l_S(zhat)
  double noise = 0.0;  // l_R(y - zhat)
  double total() const { return trace + latent + noise; }
};
EFunctionTerms exact_e_terms(const KernelModel& kernel, const NoiseModel& noise, const KernelModel& kernel0,
                             const NoiseModel& noise0, const Locations& locs, const Eigen::VectorXd& y);
double exact_e_function(const KernelModel& kernel, const NoiseModel& noise, const KernelModel& kernel0,
                        const NoiseModel& noise0, const Locations& locs, const Eigen::VectorXd& y);

}  // namespace vem
