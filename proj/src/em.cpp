#include "vem/em.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace vem {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// 0.5 (det + sum_j sum_w w^T M_j w) over the block moments.
template <typename T>
T kernel_part(std::span<const T> theta, const EMState& s) {
  const EMProblem& p = *s.problem;
  const KernelParamsT<T> k = unpack_kernel<T>(theta, p.kernel_shape);
  const VecchiaParts<T> parts = vecchia_moment_parts<T>(k, p.plan, p.locs, s.moments, &p.pairs);
  return 0.5 * (parts.det + parts.qf);
}

// 0.5 sum_i (log r_i + a_i / r_i).
template <typename T>
T noise_part(std::span<const T> theta, const EMState& s) {
  using std::log;
  const EMProblem& p = *s.problem;
  const NoiseParamsT<T> nz = unpack_noise<T>(theta, p.noise_shape);
  const int dim = static_cast<int>(p.locs.cols());
  T sum(0.0);
  for (int i = 0; i < p.n(); ++i) {
    const T r = noise_variance<T>(nz, p.locs.row(i).data(), dim);
    sum += log(r) + s.noise_moments(i) / r;
  }
  return 0.5 * sum;
}

template <typename T>
T naive_part(std::span<const T> theta, const EMProblem& p) {
  const std::size_t kd = static_cast<std::size_t>(p.kernel_dim());
  const KernelParamsT<T> k = unpack_kernel<T>(theta.first(kd), p.kernel_shape);
  const NoiseParamsT<T> nz = unpack_noise<T>(theta.subspan(kd), p.noise_shape);
  const VecchiaParts<T> parts = vecchia_nll_parts<T>(k, &nz, p.plan, p.locs, p.y, &p.pairs);
  return 0.5 * (parts.det + parts.qf + static_cast<double>(p.n()) * kLog2Pi);
}

template <typename F>
double guarded(F&& f) {
  try {
    const double v = f();
    return std::isfinite(v) ? v : kInf;
  } catch (const std::runtime_error&) {
    return kInf;
  } catch (const std::domain_error&) {
    return kInf;
  }
}

// Parameters outside the model's domain (overflowed or zero scales).
bool in_domain(const EMProblem& p, const Eigen::VectorXd& theta) {
  if (theta.size() != p.dim()) throw std::invalid_argument("wrong parameter count");
  if (!theta.allFinite()) return false;
  try {
    validate(p.kernel_at(theta));
    validate(p.noise_at(theta));
  } catch (const std::invalid_argument&) {
    return false;
  }
  return true;
}

void build_moments(EMState& s) {
  const EMProblem& p = *s.problem;
  s.moments = zero_block_moments(p.plan);
  const Eigen::MatrixXd z = s.zhat;
  add_block_moments(p.plan, z, z, 1.0, s.moments);
  s.noise_moments = (p.y - s.zhat).array().square();
  if (s.mode == TraceMode::exact) {
    add_block_submatrices(p.plan, s.exact_cov, 1.0, s.moments);
    s.noise_moments += s.exact_cov.diagonal();
    return;
  }
  const double w = 1.0 / static_cast<double>(s.ensemble.size());
  const Eigen::MatrixXd& pre = s.ensemble.presolved;
  if (s.mode == TraceMode::symmetrized) {
    add_block_moments(p.plan, pre, pre, w, s.moments);
    s.noise_moments += w * pre.rowwise().squaredNorm();
  } else {
    add_block_moments(p.plan, s.ensemble.V, pre, w, s.moments);
    s.noise_moments += w * s.ensemble.V.cwiseProduct(pre).rowwise().sum();
  }
}

double score(const EMState& s, const EMConfig& config) {
  if (!config.score) return kNaN;
  if (config.score_dense) return approx_marginal_nll(*s.problem, s.theta0, true);
  if (std::isfinite(s.system_nll)) return s.system_nll;
  return approx_marginal_nll(*s.problem, s.theta0, false);
}

}  // namespace

TraceMode parse_trace_mode(const std::string& name) {
  if (name == "symmetrized" || name == "sym") return TraceMode::symmetrized;
  if (name == "unsymmetrized" || name == "asym") return TraceMode::unsymmetrized;
  if (name == "exact") return TraceMode::exact;
  throw std::invalid_argument("unknown trace mode '" + name + "' (expected symmetrized, unsymmetrized or exact)");
}

std::string trace_mode_name(TraceMode m) {
  switch (m) {
    case TraceMode::symmetrized:
      return "symmetrized";
    case TraceMode::unsymmetrized:
      return "unsymmetrized";
    case TraceMode::exact:
      return "exact";
  }
  return "?";
}

void EMConfig::validate() const {
  if (saa_count < 1) throw std::invalid_argument("saa count must be at least 1");
  if (max_iter < 0) throw std::invalid_argument("max iterations must be nonnegative");
  if (!(tol > 0.0)) throw std::invalid_argument("EM tolerance must be positive");
  if (trace == TraceMode::symmetrized && solver.backend == Backend::cg)
    throw std::invalid_argument("symmetrized probes need a Cholesky backend (dense or sparse), not cg");
}

std::vector<std::string> EMProblem::param_names() const {
  auto names = kernel_param_names(kernel_shape);
  for (auto& s : noise_param_names(noise_shape)) names.push_back(s);
  return names;
}

KernelModel EMProblem::kernel_at(const Eigen::VectorXd& theta) const {
  return unpack_kernel(Eigen::VectorXd(theta.head(kernel_dim())), kernel_shape);
}

NoiseModel EMProblem::noise_at(const Eigen::VectorXd& theta) const {
  return unpack_noise(Eigen::VectorXd(theta.tail(noise_dim())), noise_shape);
}

std::shared_ptr<const EMProblem> make_em_problem(Locations locs, Eigen::VectorXd y, VecchiaPlan plan,
                                                 KernelModel kernel_shape, NoiseModel noise_shape) {
  if (y.size() != locs.rows() || plan.n != y.size())
    throw std::invalid_argument("data, locations and plan sizes differ");
  plan.validate();
  auto p = std::make_shared<EMProblem>();
  p->locs = std::move(locs);
  p->y = std::move(y);
  p->plan = std::move(plan);
  p->pairs = build_block_pairs(p->plan);
  p->kernel_shape = std::move(kernel_shape);
  p->noise_shape = std::move(noise_shape);
  return p;
}

Eigen::VectorXd pack_theta(const KernelModel& kernel, const NoiseModel& noise) {
  const Eigen::VectorXd k = pack_kernel(kernel), r = pack_noise(noise);
  Eigen::VectorXd t(k.size() + r.size());
  t << k, r;
  return t;
}

// ---- E step -----------------------------------------------------------------------

EMState estep_prepare(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& theta0,
                      const SaaEnsemble& ensemble, const EMConfig& config) {
  config.validate();
  const EMProblem& p = *problem;
  if (theta0.size() != p.dim()) throw std::invalid_argument("estep_prepare: parameter vector has the wrong size");
  EMState s;
  s.problem = problem;
  s.theta0 = theta0;
  s.mode = config.trace;
  const PrecisionSystem sys =
      make_precision_system(p.kernel_at(theta0), p.noise_at(theta0), p.plan, p.locs, config.solver);
  s.zhat = sys.solve(Eigen::VectorXd(sys.r_inv().cwiseProduct(p.y)));
  s.system_nll = sys.has_factor() ? approx_nll(sys, p.y) : kNaN;
  if (s.mode == TraceMode::exact) {
    const Eigen::MatrixXd c = sys.dense_inverse();
    s.exact_cov = 0.5 * (c + c.transpose());
  } else {
    if (ensemble.dim() != p.n() || ensemble.size() < 1)
      throw std::invalid_argument("estep_prepare: probe ensemble does not match the data");
    s.ensemble.V = ensemble.V;
    s.ensemble.seed = ensemble.seed;
    if (s.mode == TraceMode::symmetrized) {
      s.ensemble.presolved = sys.half_solve(ensemble.V);
      s.ensemble.mode = ProbeMode::symmetrized;
    } else {
      s.ensemble.presolved = sys.solve(ensemble.V);
      s.ensemble.mode = ProbeMode::unsymmetrized;
    }
  }
  build_moments(s);
  return s;
}

EMState restrict_probes(const EMState& state, int count) {
  if (state.mode == TraceMode::exact) throw std::invalid_argument("restrict_probes: exact mode has no probes");
  EMState s = state;
  s.ensemble = truncate_saa(state.ensemble, count);
  build_moments(s);
  return s;
}

ETerms estep_terms(const Eigen::VectorXd& theta, const EMState& state) {
  const EMProblem& p = *state.problem;
  const KernelModel kernel = p.kernel_at(theta);
  const NoiseDiagonal nd = noise_matrix(p.noise_at(theta), p.locs);
  const SparsePrecisionFactor omega = assemble_precision_factor(kernel, p.plan, p.locs);
  const double n = static_cast<double>(p.n());
  double tr = 0.0;
  if (state.mode == TraceMode::exact) {
    const Eigen::MatrixXd uc = omega.U * state.exact_cov;
    tr = uc.cwiseProduct(Eigen::MatrixXd(omega.U)).sum() + state.exact_cov.diagonal().dot(nd.r_inv);
  } else {
    const SaaEnsemble& e = state.ensemble;
    const int s = static_cast<int>(e.size());
    std::vector<double> q(s);
    parallel_for(s, [&](int j) {
      const Eigen::VectorXd pj = e.presolved.col(j);
      const Eigen::VectorXd left = state.mode == TraceMode::symmetrized ? pj : Eigen::VectorXd(e.V.col(j));
      q[j] = left.dot(precision_matvec(omega, pj)) + left.cwiseProduct(pj).dot(nd.r_inv);
    });
    for (double x : q) tr += x;
    tr /= static_cast<double>(s);
  }
  ETerms t;
  t.trace = 0.5 * tr;
  t.latent = vecchia_nll(kernel, nullptr, p.plan, p.locs, state.zhat);
  const Eigen::VectorXd res = p.y - state.zhat;
  t.noise = 0.5 * (nd.r.array().log().sum() + res.cwiseAbs2().dot(nd.r_inv) + n * kLog2Pi);
  return t;
}

double estep_objective_sym(const Eigen::VectorXd& theta, const EMState& state) {
  if (state.mode != TraceMode::symmetrized) throw std::invalid_argument("state is not in symmetrized mode");
  if (!in_domain(*state.problem, theta)) return kInf;
  return guarded([&] { return estep_terms(theta, state).total(); });
}

double estep_objective_asym(const Eigen::VectorXd& theta, const EMState& state) {
  if (state.mode != TraceMode::unsymmetrized) throw std::invalid_argument("state is not in unsymmetrized mode");
  if (!in_domain(*state.problem, theta)) return kInf;
  return guarded([&] { return estep_terms(theta, state).total(); });
}

double estep_objective_exact(const Eigen::VectorXd& theta, const EMState& state) {
  if (state.mode != TraceMode::exact) throw std::invalid_argument("state is not in exact mode");
  if (!in_domain(*state.problem, theta)) return kInf;
  return guarded([&] { return estep_terms(theta, state).total(); });
}

double estep_objective_vecchia(const Eigen::VectorXd& theta, const EMState& state) {
  const EMProblem& p = *state.problem;
  if (theta.size() != p.dim()) throw std::invalid_argument("estep_objective_vecchia: wrong parameter count");
  if (!in_domain(p, theta)) return kInf;
  return guarded([&] {
    const std::size_t kd = static_cast<std::size_t>(p.kernel_dim());
    const std::span<const double> all(theta.data(), static_cast<std::size_t>(theta.size()));
    return kernel_part(all.first(kd), state) + noise_part(all.subspan(kd), state) +
           static_cast<double>(p.n()) * kLog2Pi;
  });
}

Eigen::VectorXd estep_gradient(const Eigen::VectorXd& theta, const EMState& state) {
  const EMProblem& p = *state.problem;
  if (theta.size() != p.dim()) throw std::invalid_argument("estep_gradient: wrong parameter count");
  return dispatch_dim_in<4, 6, 8, 10>(p.dim(), [&](auto nc) {
    constexpr int N = decltype(nc)::value;
    using G = Grad<N>;
    std::array<G, N> a;
    for (int i = 0; i < N; ++i) a[i] = seed<G>(theta(i), i);
    const std::span<const G> all(a);
    const std::size_t kd = static_cast<std::size_t>(p.kernel_dim());
    const G f = kernel_part(all.first(kd), state) + noise_part(all.subspan(kd), state);
    Eigen::VectorXd g(N);
    for (int i = 0; i < N; ++i) g(i) = f.d[i];
    return g;
  });
}

Objective estep_kernel_objective(const EMState& state) {
  const EMState* s = &state;
  return dispatch_dim_in<3, 7>(state.problem->kernel_dim(), [s](auto nc) {
    return make_dual_objective<decltype(nc)::value>([s](auto th) { return kernel_part(th, *s); });
  });
}

Objective estep_noise_objective(const EMState& state) {
  const EMState* s = &state;
  return dispatch_dim_in<1, 3>(state.problem->noise_dim(), [s](auto nc) {
    return make_dual_objective<decltype(nc)::value>([s](auto th) { return noise_part(th, *s); });
  });
}

// ---- M step -----------------------------------------------------------------------

MStepResult mstep(const EMState& state, const EMConfig& config) {
  const EMProblem& p = *state.problem;
  const int kd = p.kernel_dim(), nd = p.noise_dim();
  MStepResult out;
  out.e_start = estep_objective_vecchia(state.theta0, state);
  auto fallback = [&](const std::string& why) {
    out.theta = state.theta0;
    out.e_value = out.e_start;
    out.status = "fallback: " + why;
    return out;
  };
  try {
    const OptResult rk = minimize(estep_kernel_objective(state), state.theta0.head(kd), config.mstep);
    const OptResult rn = minimize(estep_noise_objective(state), state.theta0.tail(nd), config.mstep);
    out.theta.resize(kd + nd);
    out.theta << rk.x, rn.x;
    out.e_value = estep_objective_vecchia(out.theta, state);
    out.iterations = rk.iterations;
    out.trace = rk.trace;
    out.status = status_name(rk.status);
    if (!converged(rn.status)) out.status += "; noise " + status_name(rn.status);
  } catch (const std::exception& e) {
    return fallback(e.what());
  }
  if (!(out.e_value <= out.e_start)) return fallback("no decrease of the E function");
  return out;
}

// ---- EM driver -----------------------------------------------------------------------

EMState em_fit(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init, const EMConfig& config,
               const EMCallback& on_iteration) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  SaaEnsemble probes;
  if (config.trace != TraceMode::exact) probes = draw_saa(problem->n(), config.saa_count, config.saa_seed);

  EMState state;
  try {
    state = estep_prepare(problem, init, probes, config);
  } catch (const std::exception& e) {
    throw EMError(std::string("EM initialization: ") + e.what());
  }
  EMHistoryRow row0;
  row0.theta = init;
  row0.e_value = estep_objective_vecchia(init, state);
  row0.vecchia_nll = score(state, config);
  row0.seconds = elapsed();
  row0.mstep_status = "init";
  state.history.push_back(row0);
  if (on_iteration) on_iteration(row0);

  for (int it = 1; it <= config.max_iter; ++it) {
    MStepResult ms;
    EMState next;
    try {
      ms = mstep(state, config);
      next = estep_prepare(problem, ms.theta, probes, config);
    } catch (const std::exception& e) {
      throw EMError("EM iteration " + std::to_string(it) + ": " + e.what());
    }
    const double step = (ms.theta - state.theta0).norm();
    next.history = std::move(state.history);
    next.iteration = it;
    EMHistoryRow row;
    row.iteration = it;
    row.theta = ms.theta;
    row.e_value = ms.e_value;
    row.vecchia_nll = score(next, config);
    row.seconds = elapsed();
    row.mstep_status = ms.status;
    row.mstep_iterations = ms.iterations;
    next.history.push_back(row);
    state = std::move(next);
    if (on_iteration) on_iteration(row);
    if (step <= config.tol) {
      state.converged = true;
      state.status = "converged";
      return state;
    }
  }
  state.status = "max_iter";
  return state;
}

std::vector<SaaDiagnosticRow> saa_diagnostic(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& theta0,
                                             const std::vector<int>& counts, const EMConfig& config) {
  if (config.trace == TraceMode::exact) throw std::invalid_argument("the probe diagnostic needs a stochastic trace");
  if (counts.empty()) return {};
  int most = 0;
  for (int c : counts) {
    if (c < 1) throw std::invalid_argument("probe counts must be positive");
    most = std::max(most, c);
  }
  const EMState full = estep_prepare(problem, theta0, draw_saa(problem->n(), most, config.saa_seed), config);
  std::vector<SaaDiagnosticRow> rows;
  for (int c : counts) {
    const MStepResult ms = mstep(restrict_probes(full, c), config);
    rows.push_back({c, ms.theta, ms.e_value, ms.status});
  }
  return rows;
}

// ---- naive Vecchia --------------------------------------------------------------------

double naive_vecchia_nll(const EMProblem& problem, const Eigen::VectorXd& theta) {
  if (theta.size() != problem.dim()) throw std::invalid_argument("naive_vecchia_nll: wrong parameter count");
  if (!in_domain(problem, theta)) return kInf;
  return guarded([&] {
    return naive_part(std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())), problem);
  });
}

Objective naive_vecchia_objective(std::shared_ptr<const EMProblem> problem) {
  return dispatch_dim_in<4, 6, 8, 10>(problem->dim(), [problem](auto nc) {
    return make_dual_objective<decltype(nc)::value>([problem](auto th) { return naive_part(th, *problem); });
  });
}

NaiveFit fit_naive_vecchia(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init,
                           const OptimizerConfig& config) {
  NaiveFit out;
  out.opt = minimize(naive_vecchia_objective(problem), init, config);
  out.theta = out.opt.x;
  out.nll = out.opt.f;
  return out;
}

double approx_marginal_nll(const EMProblem& problem, const Eigen::VectorXd& theta, bool dense) {
  const KernelModel k = problem.kernel_at(theta);
  const NoiseModel r = problem.noise_at(theta);
  if (dense) return approx_nll_dense(k, r, problem.plan, problem.locs, problem.y);
  return approx_nll(k, r, problem.plan, problem.locs, problem.y, Backend::sparse);
}

}  // namespace vem
