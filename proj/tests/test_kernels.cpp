#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vem/io.hpp"
#include "vem/kernels.hpp"

using namespace vem;

TEST_CASE("isotropic kernel values") {
  const KernelModel k = MaternIsoParams{10.0, 0.025, 2.25};
  const double x[2] = {0.3, 0.4};
  CHECK(kernel_eval(k, x, x) == 10.0);
  const KernelModel k05 = MaternIsoParams{10.0, 0.025, 0.5};
  const double y[2] = {0.3 + 0.025 * 0.6, 0.4 + 0.025 * 0.8};
  CHECK(kernel_eval(k05, x, y) == doctest::Approx(10.0 * std::exp(-1.0)).epsilon(1e-13));
  CHECK_THROWS(kernel_eval(k, std::span<const double>(x, 2), std::span<const double>(y, 1)));
}

TEST_CASE("anisotropic kernel agrees with the isotropic path") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.4);
  const double c = 1.7, nu = 1.3;
  AnisoKnotParams a{{c, c, c}, 3.0, -1.2, 5.0, nu, {}};
  const KernelModel ka = a;
  const KernelModel unit = MaternIsoParams{c * c, 1.0, nu};
  for (int trial = 0; trial < 50; ++trial) {
    const double x[2] = {u(rng), u(rng)}, y[2] = {u(rng), u(rng)};
    // Map both points through W^T and compare with a unit-range iso kernel.
    const double tx[2] = {a.W11 * x[0], a.W12 * x[0] + a.W22 * x[1]};
    const double ty[2] = {a.W11 * y[0], a.W12 * y[0] + a.W22 * y[1]};
    CHECK(kernel_eval(ka, x, y) == doctest::Approx(kernel_eval(unit, tx, ty)).epsilon(1e-13));
  }
  // Diagonal W = I / rho reproduces the iso model exactly.
  const double rho = 0.2;
  const KernelModel kd = AnisoKnotParams{{c, c, c}, 1.0 / rho, 0.0, 1.0 / rho, nu, {}};
  const KernelModel ki = MaternIsoParams{c * c, rho, nu};
  const double x[2] = {0.1, 0.9}, y[2] = {0.35, 0.7};
  CHECK(kernel_eval(kd, x, y) == doctest::Approx(kernel_eval(ki, x, y)).epsilon(1e-13));
}

TEST_CASE("anisotropic kernel uses knot-weighted scales") {
  AnisoKnotParams a{{1.0, 2.0, 3.0}, 1.0, 0.0, 1.0, 0.5, {}};
  const KernelModel k = a;
  const double at_knot[2] = {0.4, 0.8};
  CHECK(kernel_eval(k, at_knot, at_knot) == doctest::Approx(4.0).epsilon(1e-15));
  for (double z : {-0.3, 0.0, 0.2, 0.5, 0.81, 1.0, 1.2, 2.0}) {
    const auto w = knot_weights(KnotSpec{}, z);
    CHECK(w[0] + w[1] + w[2] == doctest::Approx(1.0).epsilon(1e-15));
    for (double wi : w) CHECK(wi >= 0.0);
  }
  KnotSpec first;
  first.dim = 0;
  CHECK(knot_weights(first, 0.2)[0] == 1.0);
}

TEST_CASE("kernel symmetry on random pairs") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.3);
  const KernelModel models[] = {MaternIsoParams{10.0, 0.1, 2.25},
                                AnisoKnotParams{{1.0, 2.5, 0.7}, 4.0, 1.5, 2.0, 1.1, {}}};
  for (const auto& k : models) {
    for (int t = 0; t < 200; ++t) {
      const double x[2] = {u(rng), u(rng)}, y[2] = {u(rng), u(rng)};
      CHECK(std::fabs(kernel_eval(k, x, y) - kernel_eval(k, y, x)) <= 1e-14 * 10.0);
    }
  }
}

TEST_CASE("cov_matrix structure") {
  const KernelModel k = MaternIsoParams{3.0, 0.2, 1.5};
  Locations one(1, 2);
  one << 0.5, 0.5;
  const Eigen::MatrixXd s1 = cov_matrix(k, one);
  CHECK(s1.rows() == 1);
  CHECK(s1(0, 0) == 3.0);
  Locations two(2, 2);
  two << 0.1, 0.2, 0.1, 0.2;
  CHECK((cov_matrix(k, two) - 3.0 * Eigen::MatrixXd::Ones(2, 2)).norm() == 0.0);
  const Locations five = testutil::random_locations(5, 2, 3);
  const Eigen::MatrixXd s = cov_matrix(k, five);
  CHECK((s - s.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10 * 3.0);
  const Locations other = testutil::random_locations(3, 2, 4);
  const Eigen::MatrixXd cross = cov_matrix(k, five, &other);
  CHECK(cross.rows() == 5);
  CHECK(cross.cols() == 3);
  CHECK(cross(4, 2) == kernel_eval(k, std::span<const double>(five.row(4).data(), 2),
                                   std::span<const double>(other.row(2).data(), 2)));
}

TEST_CASE("noise_matrix") {
  const Locations locs = testutil::random_locations(4, 2, 9);
  const NoiseDiagonal r = noise_matrix(ConstNuggetT<double>{0.25}, locs);
  for (int i = 0; i < 4; ++i) {
    CHECK(r.r(i) == 0.25);
    CHECK(std::fabs(r.r(i) * r.r_inv(i) - 1.0) <= 1e-14);
    CHECK(std::fabs(r.r_inv_sqrt(i) * r.r_inv_sqrt(i) - r.r_inv(i)) <= 1e-14 * r.r_inv(i));
  }
  Locations at(1, 2);
  at << 0.5, 1.2;
  const NoiseDiagonal rk = noise_matrix(KnotNuggetT<double>{{0.3, 0.6, 0.9}, {}}, at);
  CHECK(rk.r(0) == doctest::Approx(0.81).epsilon(1e-15));
  CHECK_THROWS(noise_matrix(ConstNuggetT<double>{0.0}, locs));
  CHECK_THROWS(noise_matrix(ConstNuggetT<double>{-1.0}, locs));
}

TEST_CASE("kernel parameter gradients match finite differences") {
  using G = Grad<7>;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.3);
  const KernelModel shapes[] = {MaternIsoParams{2.0, 0.3, 1.3},
                                AnisoKnotParams{{1.0, 2.5, 0.7}, 4.0, 1.5, 2.0, 1.1, {}}};
  for (const auto& shape : shapes) {
    const Eigen::VectorXd theta = pack_kernel(shape);
    const int p = static_cast<int>(theta.size());
    for (int trial = 0; trial < 10; ++trial) {
      const double x[2] = {u(rng), u(rng)}, y[2] = {u(rng), u(rng)};
      std::vector<G> th(p);
      for (int i = 0; i < p; ++i) th[i] = G::variable(theta(i), i);
      const KernelEvaluator<G> ev(unpack_kernel<G>(std::span<const G>(th), shape));
      const G val = ev(x, y, 2);
      for (int i = 0; i < p; ++i) {
        const double h = std::max(1e-6, 1e-6 * std::fabs(theta(i)));
        Eigen::VectorXd tp = theta, tm = theta;
        tp(i) += h;
        tm(i) -= h;
        const double fd = (kernel_eval(unpack_kernel(tp, shape), x, y) - kernel_eval(unpack_kernel(tm, shape), x, y)) /
                          (2 * h);
        CHECK(val.d[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
      }
    }
  }
}

TEST_CASE("parameter packing round trip") {
  const KernelModel k = AnisoKnotParams{{1.0, 2.5, 0.7}, 4.0, -1.5, 2.0, 1.1, {}};
  const KernelModel back = unpack_kernel(pack_kernel(k), k);
  const auto a = kernel_natural_values(k), b = kernel_natural_values(back);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-14));
  CHECK(kernel_param_names(k).size() == 7);
  CHECK(kernel_param_count(MaternIsoParams{1, 1, 1}) == 3);
  CHECK(noise_param_count(KnotNuggetT<double>{{1, 1, 1}, {}}) == 3);
}

TEST_CASE("parameter file round trip and errors") {
  ModelConfig c{AnisoKnotParams{{1.0, 2.5, 0.7}, 4.0, -1.5, 2.0, 1.1, {{0.1, 0.5, 0.9}, 0}},
                KnotNuggetT<double>{{0.1, 0.2, 0.3}, {{0.1, 0.5, 0.9}, 0}}};
  const ModelConfig back = parse_config(format_config(c));
  CHECK(format_config(back) == format_config(c));
  const auto& a = std::get<AnisoKnotParams>(back.kernel);
  CHECK(a.W12 == -1.5);
  CHECK(a.knots.dim == 0);
  CHECK(a.knots.knots[1] == 0.5);

  const ModelConfig iso = parse_config("# comment\nkind = matern_iso\nsigma2 = 10\nrho = 0.025\nnu = 2.25\neta2 = 0.25\n");
  CHECK(std::get<MaternIsoParams>(iso.kernel).rho == 0.025);
  CHECK(std::get<ConstNuggetT<double>>(*iso.noise).eta2 == 0.25);
  CHECK_THROWS(parse_config("sigma2 = 1\nrho = 1\nnu = 1\nbogus = 3\n"));
  CHECK_THROWS(parse_config("sigma2 = -1\nrho = 1\nnu = 1\n"));
  CHECK_THROWS(parse_config("sigma2 = 1\nrho = 1\n"));

  const ModelConfig t = parse_iso_tuple("(10,0.025,2.25,0.25)");
  CHECK(std::get<MaternIsoParams>(t.kernel).nu == 2.25);
  CHECK(std::get<ConstNuggetT<double>>(*t.noise).eta2 == 0.25);
  CHECK_THROWS(parse_iso_tuple("(10,0.025)"));
}

TEST_CASE("number formatting and dataset CSV round trip") {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0}) CHECK(parse_double(format_double(x), "x") == x);
  CHECK_THROWS(parse_double("1.5x", "x"));
  CHECK_THROWS(parse_double("", "x"));
  Dataset d{testutil::random_locations(7, 2, 1), testutil::random_normal(7, 2), testutil::random_normal(7, 3)};
  const Dataset back = parse_dataset_csv(format_dataset_csv(d));
  CHECK((back.locs - d.locs).norm() == 0.0);
  CHECK((back.y - d.y).norm() == 0.0);
  CHECK(((*back.z) - (*d.z)).norm() == 0.0);
  CHECK_THROWS(parse_dataset_csv("a,b\n1,2\n"));
  CHECK_THROWS(parse_dataset_csv("x1,y\n1\n"));
}
