#pragma once

// Modified Bessel function of the second kind K_nu and the Matern
// correlation built on it. Everything is templated on the scalar type so the
// same code differentiates through dual numbers in both the order nu and the
// argument.
//
// K_nu uses Temme's method: nu = mu + n with |mu| <= 1/2, a power series for
// x < 2 and Steed's continued fraction CF2 for x >= 2 give K_mu and K_{mu+1},
// then forward recurrence reaches K_nu. The Temme coefficients
// Gamma_1(mu), Gamma_2(mu) come from the Maclaurin series of log Gamma(1+mu),
// which stays smooth through mu = 0.

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

#include "vem/dual.hpp"

namespace vem {

namespace detail {

/// zeta(k) for k = 0..kZetaTerms-1; entries 0 and 1 are unused.
inline constexpr int kZetaTerms = 64;
const std::array<double, kZetaTerms>& zeta_table();

/// Largest |component| of a scalar, derivative slots included.
inline double max_abs(double x) { return std::fabs(x); }
template <typename T, int N>
double max_abs(const Dual<T, N>& x) {
  double m = max_abs(x.v);
  for (const auto& c : x.d) m = std::fmax(m, max_abs(c));
  return m;
}

/// sinh(z)/z, accurate (and smooth) near zero.
template <typename T>
T sinhc(const T& z) {
  using std::sinh;
  if (std::fabs(value_of(z)) < 1e-3) {
    const T z2 = z * z;
    return 1.0 + z2 * (1.0 / 6.0 + z2 * (1.0 / 120.0 + z2 / 5040.0));
  }
  return sinh(z) / z;
}

/// z/sin(z), accurate near zero.
template <typename T>
T inv_sinc(const T& z) {
  using std::sin;
  if (std::fabs(value_of(z)) < 1e-3) {
    const T z2 = z * z;
    return 1.0 + z2 * (1.0 / 6.0 + z2 * (7.0 / 360.0 + z2 * 31.0 / 15120.0));
  }
  return z / sin(z);
}

/// Even and odd parts of log Gamma(1+mu) = even + odd for |mu| <= 1/2, with
/// the odd part returned divided by mu so that it stays finite at mu = 0.
template <typename T>
void log_gamma1p_parts(const T& mu, T& even, T& odd_over_mu) {
  const auto& zeta = zeta_table();
  const T mu2 = mu * mu;
  // Horner over k = 2, 4, ...: zeta(k) mu^k / k
  T e(0.0);
  for (int k = kZetaTerms - 2; k >= 2; k -= 2) e = (e + zeta[k] / k) * mu2;
  // -gamma - sum_{k odd >= 3} zeta(k) mu^{k-1} / k
  T o(0.0);
  for (int k = kZetaTerms - 1; k >= 3; k -= 2) o = (o - zeta[k] / k) * mu2;
  even = e;
  odd_over_mu = o - std::numbers::egamma;
}

}  // namespace detail

/// Temme's coefficients for a reduced order |mu| <= 1/2.
template <typename T>
struct TemmeCoefficients {
  T gam1;    // (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu)
  T gam2;    // (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2
  T gampl;   // 1/Gamma(1+mu)
  T gammi;   // 1/Gamma(1-mu)

  explicit TemmeCoefficients(const T& mu) {
    using std::cosh;
    using std::exp;
    T even, q;
    detail::log_gamma1p_parts(mu, even, q);
    const T odd = mu * q;
    const T ee = exp(-even);
    gam1 = ee * q * detail::sinhc(odd);
    gam2 = ee * cosh(odd);
    gampl = exp(-even - odd);
    gammi = exp(-even + odd);
  }
};

/// Gamma(nu) for nu > 0, through the same series as the Bessel coefficients.
template <typename T>
T gamma_fn(const T& nu) {
  using std::exp;
  using std::floor;
  const double nv = value_of(nu);
  if (!(nv > 0.0)) throw std::domain_error("gamma_fn: argument must be positive");
  const int n = static_cast<int>(floor(nv + 0.5));
  const T mu = nu - static_cast<double>(n);
  T even, q;
  detail::log_gamma1p_parts(mu, even, q);
  T g = exp(even + mu * q);  // Gamma(1 + mu)
  if (n == 0) return g / mu;
  for (int k = 1; k < n; ++k) g = g * (mu + static_cast<double>(k));
  return g;
}

/// K_nu(x) for a fixed order. Construction does the order-dependent work so
/// that repeated evaluation at many x is cheap.
template <typename T>
class BesselK {
 public:
  explicit BesselK(const T& nu) : nu_(value_of(nu) < 0.0 ? -nu : nu), coef_(init_mu(nu_)) {
    using std::fabs;
    pimu_fact_ = detail::inv_sinc(T(std::numbers::pi * mu_));
  }

  /// Returns K_nu(x). Underflow for large x yields 0; overflow near x = 0
  /// throws std::overflow_error.
  T operator()(const T& x) const {
    T next;
    return evaluate(x, next);
  }

  /// K_nu(x) and K_{nu+1}(x) from the same recurrence.
  std::pair<T, T> with_next(const T& x) const {
    T next;
    T k = evaluate(x, next);
    return {k, next};
  }

  const T& order() const { return nu_; }

 private:
  T evaluate(const T& x, T& next_out) const {
    using std::cosh;
    using std::exp;
    using std::log;
    using std::sqrt;
    const double xv = value_of(x);
    if (!(xv > 0.0)) throw std::domain_error("bessel_k: argument must be positive");
    if (xv > 745.0) {
      next_out = T(0.0);
      return T(0.0);
    }

    constexpr double kEps = 1e-16;
    constexpr int kMaxIter = 100000;
    const T mu2 = mu_ * mu_;
    const T xi = 1.0 / x;
    const T xi2 = 2.0 * xi;
    T kmu, k1;
    if (xv < 2.0) {
      const T x2 = 0.5 * x;
      const T d = -log(x2);
      T e = mu_ * d;
      T ff = pimu_fact_ * (coef_.gam1 * cosh(e) + coef_.gam2 * detail::sinhc(e) * d);
      T sum = ff;
      const T ee = exp(e);
      T p = 0.5 * ee / coef_.gampl;
      T q = 0.5 / (ee * coef_.gammi);
      T c(1.0);
      const T dd = x2 * x2;
      T sum1 = p;
      int i = 1;
      for (; i <= kMaxIter; ++i) {
        const double di = i;
        ff = (di * ff + p + q) / (di * di - mu2);
        c = c * dd / di;
        p = p / (di - mu_);
        q = q / (di + mu_);
        const T del = c * ff;
        sum += del;
        const T del1 = c * (p - di * ff);
        sum1 += del1;
        if (detail::max_abs(del) < detail::max_abs(sum) * kEps &&
            detail::max_abs(del1) < detail::max_abs(sum1) * kEps)
          break;
      }
      if (i > kMaxIter) throw std::runtime_error("bessel_k: series did not converge");
      kmu = sum;
      k1 = sum1 * xi2;
    } else {
      T b = 2.0 * (1.0 + x);
      T d = 1.0 / b;
      T h = d;
      T delh = d;
      T q1(0.0), q2(1.0);
      const T a1 = 0.25 - mu2;
      T q = a1;
      T c = a1;
      T a = -a1;
      T s = 1.0 + q * delh;
      int i = 2;
      for (; i <= kMaxIter; ++i) {
        a -= 2.0 * (i - 1);
        c = -a * c / static_cast<double>(i);
        const T qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        const T dels = q * delh;
        s += dels;
        if (detail::max_abs(dels) < detail::max_abs(s) * kEps &&
            detail::max_abs(delh) < detail::max_abs(h) * kEps)
          break;
      }
      if (i > kMaxIter) throw std::runtime_error("bessel_k: continued fraction did not converge");
      h = a1 * h;
      kmu = sqrt(std::numbers::pi / (2.0 * x)) * exp(-x) / s;
      k1 = kmu * (mu_ + x + 0.5 - h) * xi;
    }
    for (int i = 1; i <= nl_; ++i) {
      const T next = (mu_ + static_cast<double>(i)) * xi2 * k1 + kmu;
      kmu = k1;
      k1 = next;
    }
    if (!std::isfinite(value_of(kmu)) || !std::isfinite(value_of(k1)))
      throw std::overflow_error("bessel_k: K_nu(x) overflows at nu=" +
                                std::to_string(value_of(nu_)) + ", x=" + std::to_string(xv));
    next_out = k1;
    return kmu;
  }

  T init_mu(const T& nu) {
    nl_ = static_cast<int>(std::floor(value_of(nu) + 0.5));
    mu_ = nu - static_cast<double>(nl_);
    return mu_;
  }

  T nu_;
  int nl_ = 0;
  T mu_;
  TemmeCoefficients<T> coef_;
  T pimu_fact_;
};

/// K_nu(x) for x > 0. Negative orders use K_{-nu} = K_nu.
template <typename T>
T bessel_k(const T& nu, const T& x) {
  return BesselK<T>(nu)(x);
}
double bessel_k(double nu, double x);

namespace detail {

/// Push a jet over two inputs (slot 0, slot 1) through a scalar type whose
/// derivatives are with respect to the model parameters.
template <typename T, typename J>
T compose2(const J& jet, const T& a, const T& b) {
  constexpr int order = derivative_order_v<T>;
  if constexpr (order == 0) {
    (void)a;
    (void)b;
    return jet;
  } else if constexpr (order == 1) {
    T out(jet.v);
    for (int i = 0; i < T::size; ++i) out.d[i] = jet.d[0] * a.d[i] + jet.d[1] * b.d[i];
    return out;
  } else {
    static_assert(order == 2, "compose2 supports up to second order");
    using G = typename T::inner_type;
    const double f = jet.v.v, fa = jet.v.d[0], fb = jet.v.d[1];
    const double faa = jet.d[0].d[0], fab = jet.d[0].d[1], fbb = jet.d[1].d[1];
    G F(f), FA(fa), FB(fb);
    for (int i = 0; i < G::size; ++i) {
      F.d[i] = fa * a.v.d[i] + fb * b.v.d[i];
      FA.d[i] = faa * a.v.d[i] + fab * b.v.d[i];
      FB.d[i] = fab * a.v.d[i] + fbb * b.v.d[i];
    }
    T out(F);
    for (int i = 0; i < T::size; ++i) out.d[i] = FA * a.d[i] + FB * b.d[i];
    return out;
  }
}

/// Scalar types used internally: a jet over two inputs and a jet over the
/// order alone, both matching T's derivative order.
template <int Order>
struct JetType;
template <>
struct JetType<0> {
  using type = double;
  using order_only = double;
};
template <>
struct JetType<1> {
  using type = Grad<2>;
  using order_only = Grad<1>;
};
template <>
struct JetType<2> {
  using type = Hess<2>;
  using order_only = Hess<1>;
};

/// Jet of K_nu(x) over (nu, x) built from order-only jets of K_nu and
/// K_{nu+1}. Derivatives in x follow from K'_nu = -K_{nu+1} + (nu/x) K_nu and
/// the Bessel equation K''_nu = (1 + nu^2/x^2) K_nu - K'_nu / x.
template <typename J, typename N>
J bessel_jet(const N& nu, double x, const N& k0, const N& k1) {
  constexpr int order = derivative_order_v<J>;
  if constexpr (order == 0) {
    (void)nu;
    (void)x;
    (void)k1;
    return k0;
  } else if constexpr (order == 1) {
    J out(k0.v);
    out.d[0] = k0.d[0];
    out.d[1] = -k1.v + nu.v / x * k0.v;
    return out;
  } else {
    const auto kx = -k1 + (nu / x) * k0;  // jet over nu of the x derivative
    const double k = k0.v.v, kn = k0.v.d[0], knn = k0.d[0].d[0];
    const double kxv = kx.v.v, knx = kx.d[0].v;
    const double nv = nu.v.v;
    const double kxx = (1.0 + nv * nv / (x * x)) * k - kxv / x;
    using G = typename J::inner_type;
    G v(k), dn(kn), dx(kxv);
    v.d[0] = kn;
    v.d[1] = kxv;
    dn.d[0] = knn;
    dn.d[1] = knx;
    dx.d[0] = knx;
    dx.d[1] = kxx;
    J out(v);
    out.d[0] = dn;
    out.d[1] = dx;
    return out;
  }
}

}  // namespace detail

/// Matern correlation M_nu(t) = 2^{1-nu}/Gamma(nu) (sqrt(2 nu) t)^nu K_nu(sqrt(2 nu) t).
///
/// Derivatives with respect to nu and t are computed on a private two-input
/// jet and then chained into T, so the Bessel iteration cost does not grow
/// with the number of model parameters. The Bessel iteration itself only
/// carries derivatives in the order.
template <typename T>
class MaternCorrelation {
  using J = typename detail::JetType<derivative_order_v<T>>::type;
  using N = typename detail::JetType<derivative_order_v<T>>::order_only;

 public:
  explicit MaternCorrelation(const T& nu)
      : nu_(nu), nu_jet_(seed<J>(value_of(nu), 0)), nu_only_(seed<N>(value_of(nu), 0)), bessel_(nu_only_) {
    using std::pow;
    using std::sqrt;
    if (!(value_of(nu) > 0.0)) throw std::domain_error("matern: smoothness must be positive");
    norm_ = pow(J(2.0), 1.0 - nu_jet_) / gamma_fn(nu_jet_);
    scale_ = sqrt(2.0 * nu_jet_);
  }

  T operator()(const T& t) const {
    using std::exp;
    using std::log;
    const double tv = value_of(t);
    if (tv < 0.0) throw std::domain_error("matern: negative distance");
    if (tv == 0.0) return T(1.0);
    const J tj = seed<J>(tv, 1);
    const J x = scale_ * tj;
    const double xv = value_of(x);
    const auto [k0, k1] = bessel_.with_next(N(xv));
    if (value_of(k0) == 0.0) return T(0.0);
    const J kx = detail::compose2(detail::bessel_jet<J>(nu_only_, xv, k0, k1), nu_jet_, x);
    const J m = norm_ * exp(nu_jet_ * log(x)) * kx;
    return detail::compose2(m, nu_, t);
  }

 private:
  T nu_;
  J nu_jet_;
  N nu_only_;
  BesselK<N> bessel_;
  J norm_;
  J scale_;
};

template <typename T>
T matern_correlation(const T& nu, const T& t) {
  return MaternCorrelation<T>(nu)(t);
}
double matern_correlation(double nu, double t);

}  // namespace vem
