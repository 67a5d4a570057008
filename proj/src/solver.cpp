#include "vem/solver.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vem/parallel.hpp"

namespace vem {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double available_memory_bytes() {
  std::ifstream in("/proc/meminfo");
  std::string key;
  double kb = 0.0;
  std::string unit;
  while (in >> key >> kb >> unit)
    if (key == "MemAvailable:") return kb * 1024.0;
  return -1.0;  // unknown
}

Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& a, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite(std::string(what) + " is not positive definite");
  return llt;
}

double llt_logdet(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

Backend parse_backend(const std::string& name) {
  if (name == "dense") return Backend::dense;
  if (name == "sparse") return Backend::sparse;
  if (name == "cg") return Backend::cg;
  throw std::invalid_argument("unknown backend '" + name + "' (expected dense, sparse or cg)");
}

std::string backend_name(Backend b) {
  switch (b) {
    case Backend::dense:
      return "dense";
    case Backend::sparse:
      return "sparse";
    case Backend::cg:
      return "cg";
  }
  return "?";
}

void check_dense_size(Eigen::Index n, int copies, bool force) {
  if (force) return;
  if (n > kDenseGuard)
    throw DenseGuardError("dense computation at n=" + std::to_string(n) + " exceeds the guard of " +
                          std::to_string(kDenseGuard) + " (use --force-dense to override)");
  const double need = static_cast<double>(copies) * static_cast<double>(n) * static_cast<double>(n) * 8.0;
  const double avail = available_memory_bytes();
  if (avail > 0.0 && need > avail)
    throw DenseGuardError("dense computation at n=" + std::to_string(n) + " needs about " +
                          std::to_string(static_cast<long long>(need / 1048576.0)) + " MiB but only " +
                          std::to_string(static_cast<long long>(avail / 1048576.0)) + " MiB are available");
}

// ---- FactorHandle -------------------------------------------------------------

FactorHandle FactorHandle::dense(const Eigen::MatrixXd& a) {
  FactorHandle f;
  f.n_ = a.rows();
  auto llt = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(a);
  if (llt->info() != Eigen::Success) throw NotPositiveDefinite("matrix is not positive definite (dense Cholesky)");
  f.logdet_ = llt_logdet(*llt);
  f.dense_ = std::move(llt);
  return f;
}

FactorHandle FactorHandle::sparse(const Eigen::SparseMatrix<double>& a) {
  FactorHandle f;
  f.n_ = a.rows();
  auto llt = std::make_shared<SparseLLT>(a);
  if (llt->info() != Eigen::Success) throw NotPositiveDefinite("matrix is not positive definite (sparse Cholesky)");
  const Eigen::SparseMatrix<double> l = llt->matrixL();
  double ld = 0.0;
  for (Eigen::Index k = 0; k < l.outerSize(); ++k) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(l, k); it; ++it)
      if (it.row() == it.col()) ld += std::log(it.value());
  }
  f.logdet_ = 2.0 * ld;
  f.sparse_ = std::move(llt);
  return f;
}

Eigen::Index FactorHandle::factor_nonzeros() const {
  if (sparse_) return Eigen::SparseMatrix<double>(sparse_->matrixL()).nonZeros();
  return n_ * (n_ + 1) / 2;
}

Eigen::VectorXd FactorHandle::solve(const Eigen::VectorXd& b) const {
  if (sparse_) return sparse_->solve(b);
  return dense_->solve(b);
}

Eigen::MatrixXd FactorHandle::solve(const Eigen::MatrixXd& b) const {
  if (sparse_) return sparse_->solve(b);
  return dense_->solve(b);
}

// A = W W^T with W = L (dense) or W = P^{-1} L (sparse, P A P^{-1} = L L^T).
Eigen::MatrixXd FactorHandle::half_solve(const Eigen::MatrixXd& v) const {
  if (sparse_) {
    const Eigen::MatrixXd t = sparse_->matrixU().solve(v);
    return sparse_->permutationPinv() * t;
  }
  return dense_->matrixU().solve(v);
}

Eigen::MatrixXd FactorHandle::apply_wt(const Eigen::MatrixXd& u) const {
  if (sparse_) {
    const Eigen::SparseMatrix<double> l = sparse_->matrixL();
    const Eigen::MatrixXd pu = sparse_->permutationP() * u;
    return l.transpose() * pu;
  }
  return dense_->matrixU() * u;
}

Eigen::MatrixXd FactorHandle::apply_w(const Eigen::MatrixXd& u) const {
  if (sparse_) {
    const Eigen::SparseMatrix<double> l = sparse_->matrixL();
    const Eigen::MatrixXd lu = l * u;
    return sparse_->permutationPinv() * lu;
  }
  return dense_->matrixL() * u;
}

double gaussian_nll(const FactorHandle& a, const Eigen::VectorXd& u) {
  if (u.size() != a.size()) throw std::invalid_argument("gaussian_nll: dimension mismatch");
  return 0.5 * (a.logdet() + u.dot(a.solve(u)) + static_cast<double>(u.size()) * kLog2Pi);
}

// ---- CG -----------------------------------------------------------------------

CgResult conjugate_gradient(const LinearOperator& apply, const Eigen::VectorXd& diag, const Eigen::VectorXd& b,
                            double tol, int maxit, const std::function<void(const Eigen::VectorXd&)>& on_iterate) {
  const Eigen::Index n = b.size();
  CgResult out;
  out.x = Eigen::VectorXd::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) return out;
  const bool precond = diag.size() == n;
  auto precondition = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
    return precond ? Eigen::VectorXd(r.cwiseQuotient(diag)) : r;
  };
  Eigen::VectorXd r = b;
  Eigen::VectorXd z = precondition(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  for (int k = 1; k <= maxit; ++k) {
    const Eigen::VectorXd ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0) || !std::isfinite(pap))
      throw SolverError("CG breakdown at iteration " + std::to_string(k) + ": operator is not positive definite");
    const double alpha = rz / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    out.iterations = k;
    out.rel_residual = r.norm() / bnorm;
    if (on_iterate) on_iterate(out.x);
    if (out.rel_residual <= tol) return out;
    z = precondition(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  std::ostringstream msg;
  msg << "CG did not converge in " << maxit << " iterations (relative residual " << out.rel_residual << ")";
  throw SolverError(msg.str());
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const SolveOptions& opts) {
  switch (opts.backend) {
    case Backend::dense:
      return FactorHandle::dense(a).solve(b);
    case Backend::sparse:
      return FactorHandle::sparse(a.sparseView()).solve(b);
    case Backend::cg:
      return conjugate_gradient([&](const Eigen::VectorXd& u) -> Eigen::VectorXd { return a * u; },
                                a.diagonal(), b, opts.cg_tol, opts.cg_maxit)
          .x;
  }
  throw std::logic_error("unreachable");
}

Eigen::VectorXd solve_spd(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, const SolveOptions& opts) {
  switch (opts.backend) {
    case Backend::dense:
      return FactorHandle::dense(Eigen::MatrixXd(a)).solve(b);
    case Backend::sparse:
      return FactorHandle::sparse(a).solve(b);
    case Backend::cg:
      return conjugate_gradient([&](const Eigen::VectorXd& u) -> Eigen::VectorXd { return a * u; },
                                a.diagonal(), b, opts.cg_tol, opts.cg_maxit)
          .x;
  }
  throw std::logic_error("unreachable");
}

Eigen::VectorXd solve_spd(const LinearOperator& apply, const Eigen::VectorXd& diag, const Eigen::VectorXd& b,
                          const SolveOptions& opts) {
  if (opts.backend != Backend::cg) throw std::invalid_argument("matrix-free solves need the cg backend");
  return conjugate_gradient(apply, diag, b, opts.cg_tol, opts.cg_maxit).x;
}

// ---- PrecisionSystem -------------------------------------------------------------

PrecisionSystem::PrecisionSystem(SparsePrecisionFactor omega, Eigen::VectorXd r_inv, const SolveOptions& opts)
    : omega_(std::move(omega)), r_inv_(std::move(r_inv)), opts_(opts) {
  if (r_inv_.size() != omega_.n) throw std::invalid_argument("PrecisionSystem: size mismatch");
  diag_ = r_inv_;
  for (Eigen::Index k = 0; k < omega_.U.outerSize(); ++k)
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(omega_.U, k); it; ++it)
      diag_(it.col()) += it.value() * it.value();
  if (opts_.backend == Backend::dense) {
    check_dense_size(size(), 2, false);
    factor_ = FactorHandle::dense(Eigen::MatrixXd(assembled()));
  } else if (opts_.backend == Backend::sparse) {
    factor_ = FactorHandle::sparse(assembled());
  }
}

Eigen::VectorXd PrecisionSystem::apply(const Eigen::VectorXd& u) const {
  return precision_matvec(omega_, u) + r_inv_.cwiseProduct(u);
}

Eigen::SparseMatrix<double> PrecisionSystem::assembled() const {
  Eigen::SparseMatrix<double> a = omega_.precision();
  for (Eigen::Index i = 0; i < size(); ++i) a.coeffRef(i, i) += r_inv_(i);
  a.makeCompressed();
  return a;
}

Eigen::VectorXd PrecisionSystem::solve(const Eigen::VectorXd& b) const {
  if (factor_) return factor_->solve(b);
  const CgResult res = conjugate_gradient([this](const Eigen::VectorXd& u) { return apply(u); }, diag_, b,
                                          opts_.cg_tol, opts_.cg_maxit);
  cg_iters_ = res.iterations;
  cg_resid_ = res.rel_residual;
  return res.x;
}

Eigen::MatrixXd PrecisionSystem::solve(const Eigen::MatrixXd& b) const {
  if (factor_) return factor_->solve(b);
  Eigen::MatrixXd out(b.rows(), b.cols());
  std::vector<int> iters(static_cast<std::size_t>(b.cols()));
  std::vector<double> resid(static_cast<std::size_t>(b.cols()));
  parallel_for(static_cast<int>(b.cols()), [&](int c) {
    const CgResult res = conjugate_gradient([this](const Eigen::VectorXd& u) { return apply(u); }, diag_,
                                            b.col(c), opts_.cg_tol, opts_.cg_maxit);
    out.col(c) = res.x;
    iters[c] = res.iterations;
    resid[c] = res.rel_residual;
  });
  cg_iters_ = 0;
  cg_resid_ = 0.0;
  for (std::size_t c = 0; c < iters.size(); ++c) {
    cg_iters_ = std::max(cg_iters_, iters[c]);
    cg_resid_ = std::max(cg_resid_, resid[c]);
  }
  return out;
}

const FactorHandle& PrecisionSystem::factor() const {
  if (!factor_) throw std::logic_error("this operation needs a Cholesky backend (dense or sparse), not cg");
  return *factor_;
}

Eigen::MatrixXd PrecisionSystem::half_solve(const Eigen::MatrixXd& v) const { return factor().half_solve(v); }

Eigen::MatrixXd PrecisionSystem::dense_inverse() const {
  check_dense_size(size(), 2, false);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(size(), size());
  if (factor_) return factor_->solve(eye);
  return FactorHandle::dense(Eigen::MatrixXd(assembled())).solve(eye);
}

PrecisionSystem make_precision_system(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan,
                                      const Locations& locs, const SolveOptions& opts) {
  return PrecisionSystem(assemble_precision_factor(kernel, plan, locs), noise_matrix(noise, locs).r_inv, opts);
}

double approx_nll(const PrecisionSystem& system, const Eigen::VectorXd& y) {
  const FactorHandle& f = system.factor();
  const Eigen::VectorXd ry = system.r_inv().cwiseProduct(y);
  const double logdet = f.logdet() - system.omega().logdet_precision() - system.r_inv().array().log().sum();
  const double quad = y.dot(ry) - ry.dot(f.solve(ry));
  return 0.5 * (logdet + quad + static_cast<double>(y.size()) * kLog2Pi);
}

double approx_nll(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan, const Locations& locs,
                  const Eigen::VectorXd& y, Backend backend) {
  SolveOptions opts;
  opts.backend = backend == Backend::cg ? Backend::sparse : backend;
  return approx_nll(make_precision_system(kernel, noise, plan, locs, opts), y);
}

double approx_nll_dense(const KernelModel& kernel, const NoiseModel& noise, const VecchiaPlan& plan,
                        const Locations& locs, const Eigen::VectorXd& y) {
  check_dense_size(locs.rows(), 3, false);
  const SparsePrecisionFactor f = assemble_precision_factor(kernel, plan, locs);
  const Eigen::MatrixXd omega = Eigen::MatrixXd(f.precision());
  Eigen::MatrixXd cov = checked_llt(omega, "Vecchia precision").solve(Eigen::MatrixXd::Identity(omega.rows(), omega.cols()));
  cov = 0.5 * (cov + cov.transpose()).eval();
  cov.diagonal() += noise_matrix(noise, locs).r;
  const auto llt = checked_llt(cov, "approximate marginal covariance");
  return 0.5 * (llt_logdet(llt) + y.dot(llt.solve(y)) + static_cast<double>(y.size()) * kLog2Pi);
}

// ---- dense oracle ---------------------------------------------------------------------

Eigen::MatrixXd dense_covariance(const KernelModel& kernel, const NoiseModel* noise, const Locations& locs) {
  Eigen::MatrixXd c = cov_matrix(kernel, locs);
  if (noise) c.diagonal() += noise_matrix(*noise, locs).r;
  return c;
}

double exact_nll(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs, const Eigen::VectorXd& y,
                 bool force_dense) {
  if (y.size() != locs.rows()) throw std::invalid_argument("exact_nll: data size mismatch");
  check_dense_size(locs.rows(), 1, force_dense);
  const auto llt = checked_llt(dense_covariance(kernel, &noise, locs), "S + R");
  return 0.5 * (llt_logdet(llt) + y.dot(llt.solve(y)) + static_cast<double>(y.size()) * kLog2Pi);
}

ConditionalLaw exact_conditional(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                 const Eigen::VectorXd& y) {
  check_dense_size(locs.rows(), 3, false);
  const Eigen::MatrixXd s = cov_matrix(kernel, locs);
  Eigen::MatrixXd c = s;
  c.diagonal() += noise_matrix(noise, locs).r;
  const auto llt = checked_llt(c, "S + R");
  ConditionalLaw out;
  out.mean = s * llt.solve(y);
  // (S^{-1} + R^{-1})^{-1} = S - S (S+R)^{-1} S
  out.cov = s - s * llt.solve(s);
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

Eigen::VectorXd conditional_mean(const KernelModel& kernel, const NoiseModel& noise, const Locations& locs,
                                 const Eigen::VectorXd& y, const VecchiaPlan* plan, const SolveOptions& opts) {
  if (opts.backend == Backend::dense) {
    check_dense_size(locs.rows(), 2, false);
    const Eigen::MatrixXd s = cov_matrix(kernel, locs);
    Eigen::MatrixXd c = s;
    c.diagonal() += noise_matrix(noise, locs).r;
    return s * checked_llt(c, "S + R").solve(y);
  }
  if (!plan) throw std::invalid_argument("conditional_mean: sparse and cg backends need a Vecchia plan");
  const PrecisionSystem sys = make_precision_system(kernel, noise, *plan, locs, opts);
  return sys.solve(Eigen::VectorXd(sys.r_inv().cwiseProduct(y)));
}

EFunctionTerms exact_e_terms(const KernelModel& kernel, const NoiseModel& noise, const KernelModel& kernel0,
                             const NoiseModel& noise0, const Locations& locs, const Eigen::VectorXd& y) {
  const ConditionalLaw law = exact_conditional(kernel0, noise0, locs, y);
  const Eigen::MatrixXd s = cov_matrix(kernel, locs);
  const NoiseDiagonal r = noise_matrix(noise, locs);
  const auto llt = checked_llt(s, "S");
  const double n = static_cast<double>(y.size());
  EFunctionTerms t;
  const Eigen::MatrixXd sinv_c = llt.solve(law.cov);
  t.trace = 0.5 * (sinv_c.trace() + r.r_inv.dot(law.cov.diagonal()));
  t.latent = 0.5 * (llt_logdet(llt) + law.mean.dot(llt.solve(law.mean)) + n * kLog2Pi);
  const Eigen::VectorXd resid = y - law.mean;
  t.noise = 0.5 * (r.r.array().log().sum() + resid.dot(r.r_inv.cwiseProduct(resid)) + n * kLog2Pi);
  return t;
}

double exact_e_function(const KernelModel& kernel, const NoiseModel& noise, const KernelModel& kernel0,
                        const NoiseModel& noise0, const Locations& locs, const Eigen::VectorXd& y) {
  return exact_e_terms(kernel, noise, kernel0, noise0, locs, y).total();
}

}  // namespace vem
