#include <cmath>
#include <numbers>
#include <vector>

#include "bessel_oracle.hpp"
#include "doctest.h"
#include "vem/special.hpp"

using vem::bessel_k;
using vem::matern_correlation;
using testutil::bessel_k_quadrature;

namespace {

double rel(double a, double b) { return std::fabs(a - b) / std::fabs(b); }

}  // namespace

TEST_CASE("bessel_k half-integer closed forms") {
  for (double x : {1e-6, 1e-3, 0.1, 0.5, 1.0, 1.99, 2.0, 2.5, 7.0, 20.0, 50.0}) {
    const double base = std::sqrt(std::numbers::pi / (2.0 * x)) * std::exp(-x);
    CHECK(rel(bessel_k(0.5, x), base) < 1e-10);
    CHECK(rel(bessel_k(1.5, x), base * (1.0 + 1.0 / x)) < 1e-10);
    CHECK(rel(bessel_k(2.5, x), base * (1.0 + 3.0 / x + 3.0 / (x * x))) < 1e-10);
  }
  CHECK(bessel_k(0.5, 1.0) == doctest::Approx(std::sqrt(std::numbers::pi / 2.0) * std::exp(-1.0)).epsilon(1e-14));
  CHECK(rel(bessel_k(1.5, 2.0), std::sqrt(std::numbers::pi / 4.0) * std::exp(-2.0) * 1.5) < 1e-12);
}

TEST_CASE("bessel_k against high-precision quadrature") {
  CHECK(rel(bessel_k_quadrature(0.5, 1.0), std::sqrt(std::numbers::pi / 2.0) * std::exp(-1.0)) < 1e-14);
  int checked = 0;
  for (double nu : {0.25, 0.5, 0.75, 1.0, 1.3, 2.0, 2.25, 3.5, 5.0, 7.3, 10.0}) {
    for (double x : {1e-6, 1e-3, 0.1, 0.7, 1.5, 1.99, 2.0, 2.01, 5.0, 12.0, 30.0, 50.0}) {
      const double want = bessel_k_quadrature(nu, x);
      INFO("nu=" << nu << " x=" << x);
      CHECK(rel(bessel_k(nu, x), want) < 1e-10);
      ++checked;
    }
  }
  CHECK(checked == 132);
}

TEST_CASE("bessel_k frozen reference values") {
  // 30-digit values computed once with an arbitrary-precision library.
  CHECK(rel(bessel_k(2.25, 0.7), 5.49029689875094627402075431577) < 1e-12);
  CHECK(rel(bessel_k(0.25, 1e-6), 68.1072278897349472729420470411) < 1e-12);
  CHECK(rel(bessel_k(10.0, 50.0), 9.15098820998799611153618404851e-23) < 1e-12);
  CHECK(rel(bessel_k(3.7, 2.0), 1.48197244975660314355771994364) < 1e-12);
  CHECK(rel(bessel_k(1.0, 1.0), 0.601907230197234574737540001536) < 1e-12);
  CHECK(rel(bessel_k(7.3, 0.01), 39882055110188726415.8274699982) < 1e-12);
}

TEST_CASE("bessel_k symmetry, domain and range handling") {
  CHECK(bessel_k(-2.25, 0.7) == bessel_k(2.25, 0.7));
  CHECK(bessel_k(0.0, 1.0) == doctest::Approx(0.42102443824070834).epsilon(1e-13));
  CHECK_THROWS_AS(bessel_k(1.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(bessel_k(1.0, -1.0), std::domain_error);
  CHECK(bessel_k(2.0, 800.0) == 0.0);
  CHECK_THROWS_AS(bessel_k(200.0, 1e-10), std::overflow_error);
}

TEST_CASE("bessel_k order derivative matches finite differences") {
  for (double nu : {0.5, 0.8, 1.0, 2.25, 4.6}) {
    for (double x : {0.05, 1.0, 1.999, 2.001, 8.0}) {
      const auto d = bessel_k(vem::Grad<2>::variable(nu, 0), vem::Grad<2>::variable(x, 1));
      const double h = 1e-6;
      const double fd_nu = (bessel_k(nu + h, x) - bessel_k(nu - h, x)) / (2 * h);
      const double fd_x = (bessel_k(nu, x + h) - bessel_k(nu, x - h)) / (2 * h);
      INFO("nu=" << nu << " x=" << x);
      CHECK(d.v == doctest::Approx(bessel_k(nu, x)).epsilon(1e-15));
      CHECK(d.d[0] == doctest::Approx(fd_nu).epsilon(1e-6));
      CHECK(d.d[1] == doctest::Approx(fd_x).epsilon(1e-6));
    }
  }
}

TEST_CASE("matern_correlation closed forms and limits") {
  for (double nu : {0.25, 0.5, 2.25, 7.0}) CHECK(matern_correlation(nu, 0.0) == 1.0);
  for (double t : {0.1, 1.0, 3.0}) CHECK(rel(matern_correlation(0.5, t), std::exp(-t)) < 1e-12);
  for (double t : {0.1, 1.0}) {
    const double s = std::sqrt(3.0) * t;
    CHECK(rel(matern_correlation(1.5, t), (1.0 + s) * std::exp(-s)) < 1e-12);
  }
  for (double t = 1e-4; t <= 20.0; t *= 1.37) {
    const double s3 = std::sqrt(3.0) * t, s5 = std::sqrt(5.0) * t;
    CHECK(rel(matern_correlation(0.5, t), std::exp(-t)) < 1e-10);
    CHECK(rel(matern_correlation(1.5, t), (1.0 + s3) * std::exp(-s3)) < 1e-10);
    CHECK(rel(matern_correlation(2.5, t), (1.0 + s5 + s5 * s5 / 3.0) * std::exp(-s5)) < 1e-10);
  }
  CHECK(matern_correlation(0.5, 1000.0) == 0.0);
}

TEST_CASE("matern_correlation is nonincreasing") {
  for (double nu : {0.5, 1.5, 2.25}) {
    double prev = matern_correlation(nu, 0.0);
    for (int i = 1; i <= 2000; ++i) {
      const double cur = matern_correlation(nu, 10.0 * i / 2000.0);
      CHECK(cur <= prev);
      CHECK(cur > 0.0);
      prev = cur;
    }
  }
}

TEST_CASE("matern_correlation second derivatives match differenced gradients") {
  using G = vem::Grad<2>;
  using H = vem::Hess<2>;
  auto grad = [](double nu, double t) {
    return matern_correlation(G::variable(nu, 0), G::variable(t, 1));
  };
  for (double nu : {0.5, 1.7, 2.25}) {
    for (double t : {0.01, 0.4, 1.3, 4.0}) {
      const H r = matern_correlation(vem::seed<H>(nu, 0), vem::seed<H>(t, 1));
      const double h = 1e-5;
      const G gn_p = grad(nu + h, t), gn_m = grad(nu - h, t);
      const G gt_p = grad(nu, t + h), gt_m = grad(nu, t - h);
      INFO("nu=" << nu << " t=" << t);
      CHECK(r.d[0].d[0] == doctest::Approx((gn_p.d[0] - gn_m.d[0]) / (2 * h)).epsilon(1e-6).scale(1e-4));
      CHECK(r.d[1].d[1] == doctest::Approx((gt_p.d[1] - gt_m.d[1]) / (2 * h)).epsilon(1e-6).scale(1e-4));
      CHECK(r.d[0].d[1] == doctest::Approx((gt_p.d[0] - gt_m.d[0]) / (2 * h)).epsilon(1e-6).scale(1e-4));
      CHECK(r.d[1].d[0] == doctest::Approx(r.d[0].d[1]).epsilon(1e-12));
    }
  }
  // Reference values of the second order derivative from an
  // arbitrary-precision library.
  CHECK(matern_correlation(vem::seed<H>(1.7, 0), H(0.01)).d[0].d[0] ==
        doctest::Approx(-0.0002703751959657073655).epsilon(1e-9));
  CHECK(matern_correlation(vem::seed<H>(2.25, 0), H(0.01)).d[0].d[0] ==
        doctest::Approx(-0.000050929614495225516862).epsilon(1e-9));
}

TEST_CASE("gamma function") {
  CHECK(vem::gamma_fn(5.0) == doctest::Approx(24.0).epsilon(1e-14));
  CHECK(vem::gamma_fn(0.5) == doctest::Approx(std::sqrt(std::numbers::pi)).epsilon(1e-14));
  for (double x : {0.3, 1.7, 2.25, 6.4}) CHECK(rel(vem::gamma_fn(x), std::tgamma(x)) < 1e-13);
}
