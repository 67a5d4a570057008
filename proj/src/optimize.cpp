#include "vem/optimize.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace vem {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double fd_step(double x, double base) { return std::max(base, base * std::fabs(x)); }

double checked(double v, const char* what) {
  if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": objective is not finite at a stencil point");
  return v;
}

// Minimize g^T p + p^T H p / 2 subject to |p| <= delta through the
// eigendecomposition of H. Handles indefinite H and the hard case.
Eigen::VectorXd trust_region_step(const Eigen::VectorXd& g, const Eigen::MatrixXd& h, double delta) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (h + h.transpose()));
  const Eigen::VectorXd lam = es.eigenvalues();
  const Eigen::MatrixXd q = es.eigenvectors();
  const Eigen::VectorXd gt = q.transpose() * g;
  const Eigen::Index n = g.size();
  auto coeffs = [&](double mu) {
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i) c(i) = -gt(i) / (lam(i) + mu);
    return c;
  };
  const double lmin = lam(0);
  if (lmin > 0.0) {
    const Eigen::VectorXd c = coeffs(0.0);
    if (c.norm() <= delta) return q * c;
  }
  const double lo = std::max(0.0, -lmin);
  const double tiny = 1e-12 * std::max(1.0, std::fabs(lmin));
  // Hard case: even the smallest admissible shift gives a step inside the
  // region, so move along the lowest eigenvector to the boundary.
  {
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i) c(i) = (lam(i) + lo > tiny) ? -gt(i) / (lam(i) + lo) : 0.0;
    const bool degenerate = std::fabs(gt(0)) <= 1e-12 * std::max(1.0, g.norm());
    if (lmin <= 0.0 && degenerate && c.norm() < delta) {
      c(0) += std::sqrt(delta * delta - c.squaredNorm());
      return q * c;
    }
  }
  double a = lo, b = lo + g.norm() / delta + tiny;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    if (mid <= a || mid >= b) break;
    if (coeffs(mid).norm() > delta)
      a = mid;
    else
      b = mid;
    if (b - a <= 1e-14 * std::max(1.0, b)) break;
  }
  return q * coeffs(b);
}

struct Counter {
  const Objective& obj;
  int evals = 0;

  double value(const Eigen::VectorXd& x) {
    ++evals;
    return safe_value(obj.value, x);
  }
  double gradient(const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    ++evals;
    try {
      const double v = obj.gradient(x, g);
      return (std::isfinite(v) && g.allFinite()) ? v : kInf;
    } catch (const std::runtime_error&) {
      return kInf;
    } catch (const std::domain_error&) {
      return kInf;
    }
  }
  double hessian(const Eigen::VectorXd& x, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
    ++evals;
    try {
      const double v = obj.hessian(x, g, h);
      return (std::isfinite(v) && g.allFinite() && h.allFinite()) ? v : kInf;
    } catch (const std::runtime_error&) {
      return kInf;
    } catch (const std::domain_error&) {
      return kInf;
    }
  }
};

void push_row(OptResult& r, int evals, double step) {
  r.trace.push_back({r.iterations, evals, r.f, r.grad.size() ? r.grad.lpNorm<Eigen::Infinity>() : 0.0, step});
}

OptResult newton(const Objective& obj, const Eigen::VectorXd& x0, const OptimizerConfig& cfg) {
  Counter c{obj};
  OptResult r;
  r.x = x0;
  r.f = c.value(x0);
  if (!std::isfinite(r.f)) throw std::domain_error("minimize: objective is not finite at the starting point");
  Eigen::MatrixXd h;
  if (!std::isfinite(c.hessian(r.x, r.grad, h)))
    throw std::domain_error("minimize: derivatives are not finite at the starting point");
  push_row(r, c.evals, 0.0);
  // Start with room for the full Newton step when the Hessian is positive
  // definite.
  double delta = cfg.init_radius;
  {
    const Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (h + h.transpose()));
    if (llt.info() == Eigen::Success)
      delta = std::min(cfg.max_radius, std::max(delta, llt.solve(r.grad).norm()));
  }
  r.status = OptStatus::max_iter;
  while (r.iterations < cfg.max_iter) {
    if (r.grad.lpNorm<Eigen::Infinity>() <= cfg.grad_tol) {
      r.status = OptStatus::converged_gradient;
      break;
    }
    if (c.evals >= cfg.max_evals) {
      r.status = OptStatus::max_evals;
      break;
    }
    const Eigen::VectorXd p = trust_region_step(r.grad, h, delta);
    const double pred = -(r.grad.dot(p) + 0.5 * p.dot(h * p));
    if (!(pred > 1e-15 * std::max(1.0, std::fabs(r.f)))) {
      r.status = OptStatus::converged_function;
      break;
    }
    const Eigen::VectorXd xt = r.x + p;
    const double ft = c.value(xt);
    const double ared = r.f - ft;
    const double rho = ared / pred;
    const double pn = p.norm();
    if (std::isfinite(ft) && ared > 0.0 && rho > cfg.accept_ratio) {
      Eigen::VectorXd gt;
      Eigen::MatrixXd ht;
      if (!std::isfinite(c.hessian(xt, gt, ht))) {
        delta = 0.25 * std::min(delta, pn);
        continue;
      }
      r.x = xt;
      r.f = ft;
      r.grad = gt;
      h = ht;
      ++r.iterations;
      push_row(r, c.evals, pn);
      if (rho > 0.75 && pn >= 0.99 * delta) delta = std::min(2.0 * delta, cfg.max_radius);
      if (rho < 0.25) delta = 0.25 * pn;
      if (pn <= cfg.step_tol * (1.0 + r.x.norm())) {
        r.status = OptStatus::converged_step;
        break;
      }
    } else {
      delta = 0.25 * std::min(delta, pn);
      if (delta <= cfg.step_tol * (1.0 + r.x.norm())) {
        r.status = OptStatus::converged_step;
        break;
      }
    }
  }
  r.evals = c.evals;
  return r;
}

OptResult bfgs(const Objective& obj, const Eigen::VectorXd& x0, const OptimizerConfig& cfg) {
  Counter c{obj};
  OptResult r;
  r.x = x0;
  r.f = c.value(x0);
  if (!std::isfinite(r.f)) throw std::domain_error("minimize: objective is not finite at the starting point");
  if (!std::isfinite(c.gradient(r.x, r.grad)))
    throw std::domain_error("minimize: gradient is not finite at the starting point");
  push_row(r, c.evals, 0.0);
  const Eigen::Index n = x0.size();
  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  r.status = OptStatus::max_iter;
  while (r.iterations < cfg.max_iter) {
    if (r.grad.lpNorm<Eigen::Infinity>() <= cfg.grad_tol) {
      r.status = OptStatus::converged_gradient;
      break;
    }
    if (c.evals >= cfg.max_evals) {
      r.status = OptStatus::max_evals;
      break;
    }
    Eigen::VectorXd d = -hinv * r.grad;
    if (!(r.grad.dot(d) < 0.0)) {
      hinv.setIdentity();
      d = -r.grad;
    }
    if (d.norm() > cfg.max_radius) d *= cfg.max_radius / d.norm();
    const double slope = r.grad.dot(d);
    double t = 1.0, ft = kInf;
    bool ok = false;
    while (t * d.norm() > cfg.step_tol * (1.0 + r.x.norm()) && c.evals < cfg.max_evals) {
      ft = c.value(r.x + t * d);
      if (std::isfinite(ft) && ft <= r.f + cfg.armijo * t * slope && ft < r.f) {
        ok = true;
        break;
      }
      t *= 0.5;
    }
    if (!ok) {
      r.status = c.evals >= cfg.max_evals ? OptStatus::max_evals : OptStatus::converged_step;
      break;
    }
    const Eigen::VectorXd s = t * d;
    const Eigen::VectorXd xt = r.x + s;
    Eigen::VectorXd gt;
    if (!std::isfinite(c.gradient(xt, gt))) {
      r.status = OptStatus::failed;
      break;
    }
    const Eigen::VectorXd y = gt - r.grad;
    r.x = xt;
    r.f = ft;
    r.grad = gt;
    ++r.iterations;
    push_row(r, c.evals, s.norm());
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        hinv *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd e = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
      hinv = e * hinv * e.transpose() + rho * s * s.transpose();
    }
    if (s.norm() <= cfg.step_tol * (1.0 + r.x.norm())) {
      r.status = OptStatus::converged_step;
      break;
    }
  }
  r.evals = c.evals;
  return r;
}

}  // namespace

OptMethod parse_opt_method(const std::string& name) {
  if (name == "newton" || name == "newton_trust_region") return OptMethod::newton_trust_region;
  if (name == "bfgs") return OptMethod::bfgs;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected newton or bfgs)");
}

GradMode parse_grad_mode(const std::string& name) {
  if (name == "dual") return GradMode::dual;
  if (name == "fd" || name == "finite_diff") return GradMode::finite_diff;
  throw std::invalid_argument("unknown gradient mode '" + name + "' (expected dual or fd)");
}

std::string method_name(OptMethod m) { return m == OptMethod::bfgs ? "bfgs" : "newton"; }
std::string grad_mode_name(GradMode g) { return g == GradMode::dual ? "dual" : "fd"; }

std::string status_name(OptStatus s) {
  switch (s) {
    case OptStatus::converged_gradient:
      return "converged_gradient";
    case OptStatus::converged_step:
      return "converged_step";
    case OptStatus::converged_function:
      return "converged_function";
    case OptStatus::max_evals:
      return "max_evals";
    case OptStatus::max_iter:
      return "max_iter";
    case OptStatus::failed:
      return "failed";
  }
  return "?";
}

double safe_value(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x) {
  try {
    const double v = f(x);
    return std::isfinite(v) ? v : kInf;
  } catch (const std::runtime_error&) {
    return kInf;
  } catch (const std::domain_error&) {
    return kInf;
  }
}

Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = fd_step(x(i), 1e-6);
    xp(i) = x(i) + h;
    const double fp = checked(f(xp), "fd_gradient");
    xp(i) = x(i) - h;
    const double fm = checked(f(xp), "fd_gradient");
    xp(i) = x(i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd hm(n, n);
  Eigen::VectorXd step(n);
  for (Eigen::Index i = 0; i < n; ++i) step(i) = fd_step(x(i), 1e-4);
  const double f0 = checked(f(x), "fd_hessian");
  auto at = [&](Eigen::Index i, double si, Eigen::Index j, double sj) {
    Eigen::VectorXd xp = x;
    xp(i) += si * step(i);
    xp(j) += sj * step(j);
    return checked(f(xp), "fd_hessian");
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd xp = x;
    xp(i) = x(i) + step(i);
    const double fp = checked(f(xp), "fd_hessian");
    xp(i) = x(i) - step(i);
    const double fm = checked(f(xp), "fd_hessian");
    hm(i, i) = (fp - 2.0 * f0 + fm) / (step(i) * step(i));
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) /
                       (4.0 * step(i) * step(j));
      hm(i, j) = hm(j, i) = v;
    }
  }
  return hm;
}

Objective finite_difference_objective(const Objective& objective) {
  Objective out;
  out.dim = objective.dim;
  out.value = objective.value;
  const auto f = objective.value;
  out.gradient = [f](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g = fd_gradient(f, x);
    return f(x);
  };
  out.hessian = [f](const Eigen::VectorXd& x, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
    g = fd_gradient(f, x);
    h = fd_hessian(f, x);
    return f(x);
  };
  return out;
}

OptResult minimize(const Objective& objective, const Eigen::VectorXd& x0, const OptimizerConfig& config) {
  if (!objective.value) throw std::invalid_argument("minimize: objective has no value function");
  if (x0.size() != objective.dim) throw std::invalid_argument("minimize: starting point has the wrong dimension");
  if (config.max_evals < 1 || !(config.grad_tol > 0.0) || !(config.step_tol > 0.0))
    throw std::invalid_argument("minimize: budgets and tolerances must be positive");
  const bool fd = config.grad_mode == GradMode::finite_diff || !objective.gradient ||
                  (config.method == OptMethod::newton_trust_region && !objective.hessian);
  const Objective obj = fd ? finite_difference_objective(objective) : objective;
  return config.method == OptMethod::bfgs ? bfgs(obj, x0, config) : newton(obj, x0, config);
}

}  // namespace vem
