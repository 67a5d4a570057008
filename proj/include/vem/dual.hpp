#pragma once

// Forward-mode dual numbers with a fixed number of derivative slots.
//
// Dual<double, N> carries a value and its gradient with respect to N seeded
// inputs. Nesting, Dual<Dual<double, N>, N>, carries the Hessian as well:
// for a nested number h, h.v.d[i] and h.d[i].v are both the i-th partial and
// h.d[i].d[j] is the (i, j) second partial.

#include <array>
#include <cmath>
#include <ostream>
#include <type_traits>

namespace vem {

template <typename T, int N>
struct Dual {
  static_assert(N >= 1, "a dual number needs at least one derivative slot");
  using inner_type = T;
  static constexpr int size = N;

  T v{};
  std::array<T, N> d{};

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: implicit lift of constants
  template <typename U = T, std::enable_if_t<!std::is_same_v<U, double>, int> = 0>
  constexpr Dual(const T& value) : v(value) {}  // NOLINT

  /// Seed slot `i` with unit derivative.
  static Dual variable(const T& value, int i) {
    Dual out(value);
    out.d[static_cast<std::size_t>(i)] = T(1.0);
    return out;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const T inv = T(1.0) / o.v;
    v *= inv;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - v * o.d[i]) * inv;
    return *this;
  }
  Dual& operator+=(double s) {
    v += s;
    return *this;
  }
  Dual& operator-=(double s) {
    v -= s;
    return *this;
  }
  Dual& operator*=(double s) {
    v *= s;
    for (auto& x : d) x *= s;
    return *this;
  }
  Dual& operator/=(double s) { return *this *= (1.0 / s); }
};

template <typename T>
struct is_dual : std::false_type {};
template <typename T, int N>
struct is_dual<Dual<T, N>> : std::true_type {};
template <typename T>
inline constexpr bool is_dual_v = is_dual<T>::value;

/// Derivative order carried by a scalar type: 0 for double, 1 for a dual,
/// 2 for a dual of duals.
template <typename T>
struct derivative_order : std::integral_constant<int, 0> {};
template <typename T, int N>
struct derivative_order<Dual<T, N>>
    : std::integral_constant<int, 1 + derivative_order<T>::value> {};
template <typename T>
inline constexpr int derivative_order_v = derivative_order<T>::value;

inline double value_of(double x) { return x; }
template <typename T, int N>
double value_of(const Dual<T, N>& x) {
  return value_of(x.v);
}

// ---- arithmetic ----------------------------------------------------------

template <typename T, int N>
Dual<T, N> operator-(const Dual<T, N>& a) {
  Dual<T, N> out;
  out.v = -a.v;
  for (int i = 0; i < N; ++i) out.d[i] = -a.d[i];
  return out;
}
template <typename T, int N>
Dual<T, N> operator+(const Dual<T, N>& a) {
  return a;
}

template <typename T, int N>
Dual<T, N> operator+(Dual<T, N> a, const Dual<T, N>& b) {
  return a += b;
}
template <typename T, int N>
Dual<T, N> operator-(Dual<T, N> a, const Dual<T, N>& b) {
  return a -= b;
}
template <typename T, int N>
Dual<T, N> operator*(const Dual<T, N>& a, const Dual<T, N>& b) {
  Dual<T, N> out;
  out.v = a.v * b.v;
  for (int i = 0; i < N; ++i) out.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return out;
}
template <typename T, int N>
Dual<T, N> operator/(Dual<T, N> a, const Dual<T, N>& b) {
  return a /= b;
}

template <typename T, int N>
Dual<T, N> operator+(Dual<T, N> a, double s) {
  return a += s;
}
template <typename T, int N>
Dual<T, N> operator+(double s, Dual<T, N> a) {
  return a += s;
}
template <typename T, int N>
Dual<T, N> operator-(Dual<T, N> a, double s) {
  return a -= s;
}
template <typename T, int N>
Dual<T, N> operator-(double s, const Dual<T, N>& a) {
  Dual<T, N> out = -a;
  out.v += s;
  return out;
}
template <typename T, int N>
Dual<T, N> operator*(Dual<T, N> a, double s) {
  return a *= s;
}
template <typename T, int N>
Dual<T, N> operator*(double s, Dual<T, N> a) {
  return a *= s;
}
template <typename T, int N>
Dual<T, N> operator/(Dual<T, N> a, double s) {
  return a /= s;
}
template <typename T, int N>
Dual<T, N> operator/(double s, const Dual<T, N>& a) {
  Dual<T, N> out;
  const T inv = T(1.0) / a.v;
  out.v = s * inv;
  const T g = -out.v * inv;
  for (int i = 0; i < N; ++i) out.d[i] = g * a.d[i];
  return out;
}

// Comparisons look at values only; they drive branches, never derivatives.
template <typename T, int N>
bool operator<(const Dual<T, N>& a, const Dual<T, N>& b) {
  return value_of(a) < value_of(b);
}
template <typename T, int N>
bool operator>(const Dual<T, N>& a, const Dual<T, N>& b) {
  return value_of(a) > value_of(b);
}
template <typename T, int N>
bool operator<(const Dual<T, N>& a, double b) {
  return value_of(a) < b;
}
template <typename T, int N>
bool operator>(const Dual<T, N>& a, double b) {
  return value_of(a) > b;
}
template <typename T, int N>
bool operator<=(const Dual<T, N>& a, double b) {
  return value_of(a) <= b;
}
template <typename T, int N>
bool operator>=(const Dual<T, N>& a, double b) {
  return value_of(a) >= b;
}

// ---- elementary functions -----------------------------------------------
//
// Each applies the chain rule with a derivative expressed in the inner type,
// so nesting works without extra code.

namespace detail {
template <typename T, int N>
Dual<T, N> chain(const T& value, const T& slope, const Dual<T, N>& a) {
  Dual<T, N> out;
  out.v = value;
  for (int i = 0; i < N; ++i) out.d[i] = slope * a.d[i];
  return out;
}
}  // namespace detail

template <typename T, int N>
Dual<T, N> exp(const Dual<T, N>& a) {
  using std::exp;
  const T e = exp(a.v);
  return detail::chain(e, e, a);
}
template <typename T, int N>
Dual<T, N> log(const Dual<T, N>& a) {
  using std::log;
  return detail::chain(T(log(a.v)), T(1.0 / a.v), a);
}
template <typename T, int N>
Dual<T, N> sqrt(const Dual<T, N>& a) {
  using std::sqrt;
  const T s = sqrt(a.v);
  return detail::chain(s, T(0.5 / s), a);
}
template <typename T, int N>
Dual<T, N> sin(const Dual<T, N>& a) {
  using std::cos;
  using std::sin;
  return detail::chain(T(sin(a.v)), T(cos(a.v)), a);
}
template <typename T, int N>
Dual<T, N> cos(const Dual<T, N>& a) {
  using std::cos;
  using std::sin;
  return detail::chain(T(cos(a.v)), T(-sin(a.v)), a);
}
template <typename T, int N>
Dual<T, N> sinh(const Dual<T, N>& a) {
  using std::cosh;
  using std::sinh;
  return detail::chain(T(sinh(a.v)), T(cosh(a.v)), a);
}
template <typename T, int N>
Dual<T, N> cosh(const Dual<T, N>& a) {
  using std::cosh;
  using std::sinh;
  return detail::chain(T(cosh(a.v)), T(sinh(a.v)), a);
}
template <typename T, int N>
Dual<T, N> abs(const Dual<T, N>& a) {
  return value_of(a) < 0.0 ? -a : a;
}
/// a^p for a constant exponent.
template <typename T, int N>
Dual<T, N> pow(const Dual<T, N>& a, double p) {
  using std::pow;
  const T base = pow(a.v, p - 1.0);
  return detail::chain(T(base * a.v), T(p * base), a);
}
/// a^b = exp(b log a), a > 0.
template <typename T, int N>
Dual<T, N> pow(const Dual<T, N>& a, const Dual<T, N>& b) {
  return exp(b * log(a));
}

inline bool is_finite(double x) { return std::isfinite(x); }
template <typename T, int N>
bool is_finite(const Dual<T, N>& a) {
  if (!is_finite(a.v)) return false;
  for (const auto& x : a.d)
    if (!is_finite(x)) return false;
  return true;
}

template <typename T, int N>
std::ostream& operator<<(std::ostream& os, const Dual<T, N>& a) {
  os << a.v << " + [";
  for (int i = 0; i < N; ++i) os << (i ? ", " : "") << a.d[i];
  return os << "]e";
}

// Convenience aliases for gradient and Hessian carriers.
template <int N>
using Grad = Dual<double, N>;
template <int N>
using Hess = Dual<Dual<double, N>, N>;

/// Lift a plain parameter into slot `i` of a first or second order carrier.
template <typename T>
T seed(double value, int i) {
  if constexpr (derivative_order_v<T> == 0) {
    (void)i;
    return value;
  } else if constexpr (derivative_order_v<T> == 1) {
    return T::variable(value, i);
  } else {
    using Inner = typename T::inner_type;
    T out(Inner::variable(value, i));
    out.d[static_cast<std::size_t>(i)] = Inner(1.0);
    return out;
  }
}

}  // namespace vem
