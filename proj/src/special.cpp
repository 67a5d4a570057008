#include "vem/special.hpp"

#include <cmath>

namespace vem {

namespace detail {

namespace {

// Euler-Maclaurin summation of zeta(s) = sum_{n >= 1} n^{-s}, s >= 2.
double zeta_em(int s) {
  constexpr int kCut = 12;
  // B_2, B_4, ..., B_16
  constexpr std::array<double, 8> bernoulli = {1.0 / 6.0,     -1.0 / 30.0, 1.0 / 42.0,
                                               -1.0 / 30.0,   5.0 / 66.0,  -691.0 / 2730.0,
                                               7.0 / 6.0,     -3617.0 / 510.0};
  double sum = 0.0;
  for (int n = kCut - 1; n >= 1; --n) sum += std::pow(static_cast<double>(n), -s);
  const double N = kCut;
  double tail = std::pow(N, 1.0 - s) / (s - 1.0) + 0.5 * std::pow(N, -s);
  // rising factorial s (s+1) ... (s+2j-2) / (2j)!
  double rising = s;
  double fact = 2.0;
  for (int j = 1; j <= static_cast<int>(bernoulli.size()); ++j) {
    tail += bernoulli[j - 1] * rising / fact * std::pow(N, -s - 2.0 * j + 1.0);
    rising *= (s + 2.0 * j - 1.0) * (s + 2.0 * j);
    fact *= (2.0 * j + 1.0) * (2.0 * j + 2.0);
  }
  return sum + tail;
}

}  // namespace

const std::array<double, kZetaTerms>& zeta_table() {
  static const std::array<double, kZetaTerms> table = [] {
    std::array<double, kZetaTerms> t{};
    t[0] = -0.5;
    t[1] = HUGE_VAL;
    for (int k = 2; k < kZetaTerms; ++k) t[k] = zeta_em(k);
    return t;
  }();
  return table;
}

}  // namespace detail

double bessel_k(double nu, double x) { return BesselK<double>(nu)(x); }

double matern_correlation(double nu, double t) { return MaternCorrelation<double>(nu)(t); }

}  // namespace vem
