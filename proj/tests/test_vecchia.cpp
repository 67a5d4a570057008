#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "vem/vecchia.hpp"

using namespace vem;
using testutil::iso;

namespace {

double sq(const Locations& x, int a, int b) { return (x.row(a) - x.row(b)).squaredNorm(); }

// Earlier-ranked k nearest by full sort, independent of the library search.
std::vector<int> nearest_by_sort(const Locations& x, const std::vector<int>& perm, int j, int k) {
  std::vector<int> ranks(j);
  std::iota(ranks.begin(), ranks.end(), 0);
  std::sort(ranks.begin(), ranks.end(), [&](int a, int b) {
    const double da = sq(x, perm[j], perm[a]), db = sq(x, perm[j], perm[b]);
    return da < db || (da == db && a < b);
  });
  ranks.resize(std::min(j, k));
  std::sort(ranks.begin(), ranks.end());
  std::vector<int> out;
  for (int r : ranks) out.push_back(perm[r]);
  return out;
}

double rel(double a, double b) { return std::fabs(a - b) / std::fabs(b); }

}  // namespace

TEST_CASE("maximin ordering") {
  Locations one(1, 2);
  one << 0.3, 0.3;
  CHECK(maximin_order(one) == std::vector<int>{0});

  Locations sqr(4, 2);
  sqr << 0, 0, 1, 0, 1, 1, 0, 1;
  const auto o = maximin_order(sqr);
  CHECK(o[0] == 0);
  CHECK(o[1] == 2);

  const Locations x = testutil::random_locations(100, 2, 17);
  const auto perm = maximin_order(x);
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) CHECK(sorted[i] == i);
  // Seed is closest to the centroid.
  const Eigen::RowVectorXd c = x.colwise().mean();
  for (int i = 0; i < 100; ++i) CHECK((x.row(perm[0]) - c).squaredNorm() <= (x.row(i) - c).squaredNorm());
  // Each later point attains the max over remaining points of the min
  // distance to the points already placed.
  for (int k = 1; k < 100; ++k) {
    auto mind = [&](int cand) {
      double m = 1e300;
      for (int r = 0; r < k; ++r) m = std::min(m, sq(x, cand, perm[r]));
      return m;
    };
    const double chosen = mind(perm[k]);
    for (int r = k + 1; r < 100; ++r) CHECK(mind(perm[r]) <= chosen);
  }
}

TEST_CASE("coordinate ordering is lexicographic") {
  Locations x(4, 2);
  x << 0.5, 0.1, 0.2, 0.9, 0.5, 0.0, 0.2, 0.3;
  CHECK(coordinate_order(x) == std::vector<int>{3, 1, 2, 0});
  CHECK_THROWS(make_order(x, "spiral"));
}

TEST_CASE("nearest-neighbour conditioning sets") {
  const Locations x = testutil::random_locations(50, 2, 23);
  const auto perm = maximin_order(x);
  const VecchiaPlan p10 = build_conditioning(x, perm, ConditioningMode::nearest(10));
  CHECK(p10.cond_sets[0].empty());
  const VecchiaPlan p3 = build_conditioning(x, perm, ConditioningMode::nearest(3));
  CHECK(p3.cond_sets[1] == std::vector<int>{perm[0]});
  const VecchiaPlan p5 = build_conditioning(x, perm, ConditioningMode::nearest(5));
  p5.validate();
  for (int j = 0; j < 50; ++j) CHECK(p5.cond_sets[j] == nearest_by_sort(x, perm, j, 5));
  CHECK(p5.num_blocks() == 50);
}

TEST_CASE("k-d tree search matches brute force") {
  const Locations x = testutil::random_locations(3000, 2, 29);
  const auto perm = maximin_order(x);
  CHECK(nearest_earlier_kdtree(x, perm, 10) == nearest_earlier_bruteforce(x, perm, 10));
  // A lattice has many exact distance ties.
  Locations g(900, 2);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) g.row(i * 30 + j) << i, j;
  std::vector<int> nat(900);
  std::iota(nat.begin(), nat.end(), 0);
  CHECK(nearest_earlier_kdtree(g, nat, 7) == nearest_earlier_bruteforce(g, nat, 7));
  CHECK(nearest_earlier_kdtree(g, maximin_order(g), 7) == nearest_earlier_bruteforce(g, maximin_order(g), 7));
  const Locations x3 = testutil::random_locations(1500, 3, 31);
  CHECK(nearest_earlier_kdtree(x3, make_order(x3, "natural"), 12) ==
        nearest_earlier_bruteforce(x3, make_order(x3, "natural"), 12));
}

TEST_CASE("chunked conditioning") {
  const Locations x = testutil::random_locations(47, 2, 3);
  const auto perm = coordinate_order(x);
  const VecchiaPlan p = build_conditioning(x, perm, ConditioningMode::chunked(10, 3));
  p.validate();
  CHECK(p.num_blocks() == 5);
  CHECK(p.block_size(4) == 7);
  CHECK(p.cond_sets[0].empty());
  CHECK(p.cond_sets[1].size() == 10);
  CHECK(p.cond_sets[4].size() == 30);
  CHECK(p.cond_sets[4].front() == perm[10]);
  CHECK(p.factor_nnz_bound() == 10 * 10 + 10 * 20 + 10 * 30 + 10 * 40 + 7 * 37);
}

TEST_CASE("plan serialization round trip") {
  const Locations x = testutil::random_locations(40, 2, 8);
  for (const auto& mode : {ConditioningMode::nearest(4), ConditioningMode::chunked(6, 2)}) {
    const VecchiaPlan p = build_conditioning(x, maximin_order(x), mode, "maximin");
    const VecchiaPlan q = parse_plan(format_plan(p));
    CHECK(q.perm == p.perm);
    CHECK(q.block_starts == p.block_starts);
    CHECK(q.cond_sets == p.cond_sets);
    CHECK(q.ordering == "maximin");
    CHECK(format_plan(q) == format_plan(p));
  }
  CHECK_THROWS(parse_plan("vecchia_plan 2\n"));
  VecchiaPlan bad = build_conditioning(x, maximin_order(x), ConditioningMode::nearest(3));
  bad.cond_sets[2].push_back(bad.perm[5]);
  CHECK_THROWS(bad.validate());
}

TEST_CASE("full conditioning reproduces the exact likelihood") {
  const KernelModel k = iso(2.0, 0.15, 1.3);
  for (int n : {50, 150, 300}) {
    const Locations x = testutil::random_locations(n, 2, 100 + n);
    const Eigen::VectorXd y = testutil::random_normal(n, 200 + n);
    const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::full());
    const Eigen::MatrixXd s = cov_matrix(k, x);
    CHECK(rel(vecchia_nll(k, nullptr, plan, x, y), testutil::dense_nll(s, y)) <= 1e-8);
    // Folding a nugget into the local covariances gives the exact marginal.
    const NoiseModel r = testutil::nugget(0.3);
    const Eigen::MatrixXd sr = s + 0.3 * Eigen::MatrixXd::Identity(n, n);
    CHECK(rel(vecchia_nll(k, &r, plan, x, y), testutil::dense_nll(sr, y)) <= 1e-8);
  }
}

TEST_CASE("full conditioning is ordering invariant") {
  const KernelModel k = iso(1.0, 0.2, 2.25);
  const Locations x = testutil::random_locations(120, 2, 5);
  const Eigen::VectorXd y = testutil::random_normal(120, 6);
  const NoiseModel r = testutil::nugget(0.1);
  const double a = vecchia_nll(k, &r, build_conditioning(x, maximin_order(x), ConditioningMode::full()), x, y);
  const double b = vecchia_nll(k, &r, build_conditioning(x, coordinate_order(x), ConditioningMode::full()), x, y);
  CHECK(rel(a, b) <= 1e-8);
  const double c = vecchia_nll(k, &r, build_conditioning(x, coordinate_order(x), ConditioningMode::chunked(16, 100)), x, y);
  CHECK(rel(a, c) <= 1e-8);
}

TEST_CASE("single observation") {
  const KernelModel k = iso(3.0, 0.5, 0.7);
  Locations x(1, 2);
  x << 0.2, 0.1;
  Eigen::VectorXd u(1);
  u << 1.7;
  const VecchiaPlan plan = build_conditioning(x, {0}, ConditioningMode::nearest(10));
  const auto parts = vecchia_nll_parts(k, nullptr, plan, x, u);
  CHECK(parts.det == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(parts.qf == doctest::Approx(1.7 * 1.7 / 3.0).epsilon(1e-15));
  const auto f = assemble_precision_factor(k, plan, x);
  CHECK(Eigen::MatrixXd(f.U)(0, 0) == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-15));
}

TEST_CASE("precision factor agrees with the blockwise sums") {
  const KernelModel k = iso(10.0, 0.05, 2.25);
  for (int n : {200, 500}) {
    const Locations x = testutil::random_locations(n, 2, 40 + n);
    const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::nearest(10));
    const auto f = assemble_precision_factor(k, plan, x);
    CHECK(static_cast<std::size_t>(f.U.nonZeros()) <= plan.factor_nnz_bound());
    for (unsigned s = 0; s < 3; ++s) {
      const Eigen::VectorXd u = testutil::random_normal(n, 7 + s);
      const auto parts = vecchia_nll_parts(k, nullptr, plan, x, u);
      CHECK(rel(u.dot(precision_matvec(f, u)), parts.qf) <= 1e-10);
      CHECK(std::fabs(f.logdet_precision() + parts.det) <= 1e-10 * std::fabs(parts.det));
    }
  }
}

TEST_CASE("chunked precision factor") {
  const KernelModel k = AnisoKnotParams{{1.0, 1.5, 0.8}, 6.0, 2.0, 4.0, 1.2, {}};
  const Locations x = testutil::random_locations(90, 2, 77);
  const VecchiaPlan plan = build_conditioning(x, coordinate_order(x), ConditioningMode::chunked(7, 2));
  const auto f = assemble_precision_factor(k, plan, x);
  const Eigen::VectorXd u = testutil::random_normal(90, 1);
  const auto parts = vecchia_nll_parts(k, nullptr, plan, x, u);
  CHECK(rel(u.dot(precision_matvec(f, u)), parts.qf) <= 1e-10);
  CHECK(rel(-f.logdet_precision(), parts.det) <= 1e-10);
}

TEST_CASE("full conditioning precision equals the dense inverse") {
  const KernelModel k = iso(2.0, 0.3, 1.1);
  const Locations x = testutil::random_locations(50, 2, 12);
  const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::full());
  const auto f = assemble_precision_factor(k, plan, x);
  const Eigen::MatrixXd sinv = cov_matrix(k, x).inverse();
  const Eigen::MatrixXd omega = Eigen::MatrixXd(f.precision());
  CHECK((omega - sinv).cwiseAbs().maxCoeff() <= 1e-8 * sinv.norm());
  // The lower factor view reproduces the same matrix.
  const Eigen::MatrixXd l = Eigen::MatrixXd(f.lower());
  CHECK((l * l.transpose() - omega).norm() <= 1e-12 * omega.norm());
}

TEST_CASE("precision matvec is linear") {
  const KernelModel k = iso(1.0, 0.1, 0.9);
  const Locations x = testutil::random_locations(120, 2, 13);
  const auto f = assemble_precision_factor(k, build_conditioning(x, maximin_order(x), ConditioningMode::nearest(6)), x);
  CHECK(precision_matvec(f, Eigen::VectorXd::Zero(120)).norm() == 0.0);
  const Eigen::VectorXd u = testutil::random_normal(120, 1), v = testutil::random_normal(120, 2);
  const Eigen::VectorXd lhs = precision_matvec(f, u + v), rhs = precision_matvec(f, u) + precision_matvec(f, v);
  CHECK((lhs - rhs).norm() <= 1e-12 * rhs.norm());
  CHECK_THROWS(precision_matvec(f, Eigen::VectorXd::Zero(5)));
}

TEST_CASE("KL divergence decreases with more neighbours") {
  const KernelModel k = iso(1.0, 0.1, 1.5);
  const int n = 300;
  const Locations x = testutil::random_locations(n, 2, 55);
  const auto perm = maximin_order(x);
  const Eigen::MatrixXd s = cov_matrix(k, x);
  const double logdet_s = 2.0 * Eigen::LLT<Eigen::MatrixXd>(s).matrixL().toDenseMatrix().diagonal().array().log().sum();
  double prev = 1e300;
  for (int m : {1, 5, 10, 20}) {
    const auto f = assemble_precision_factor(k, build_conditioning(x, perm, ConditioningMode::nearest(m)), x);
    const Eigen::MatrixXd omega = Eigen::MatrixXd(f.precision());
    const double kl = 0.5 * ((omega * s).trace() - n - f.logdet_precision() - logdet_s);
    CHECK(kl >= -1e-9);
    CHECK(kl <= prev + 1e-9);
    prev = kl;
  }
}

TEST_CASE("moment form reproduces sums of quadratic forms") {
  const KernelModel k = iso(10.0, 0.05, 2.25);
  const int n = 150;
  const Locations x = testutil::random_locations(n, 2, 61);
  const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::nearest(8));
  Eigen::MatrixXd u(n, 4);
  for (int c = 0; c < 4; ++c) u.col(c) = testutil::random_normal(n, 90 + c);
  BlockMoments m = zero_block_moments(plan);
  add_block_moments(plan, u, u, 0.5, m);
  double want = 0.0;
  for (int c = 0; c < 4; ++c) want += 0.5 * vecchia_nll_parts(k, nullptr, plan, x, u.col(c)).qf;
  const auto parts = vecchia_moment_parts<double>(k, plan, x, m);
  CHECK(rel(parts.qf, want) <= 1e-10);
  CHECK(parts.det == vecchia_nll_parts(k, nullptr, plan, x, u.col(0)).det);
  // Paired columns give the cross form sum_c a_c^T Omega b_c.
  Eigen::MatrixXd w(n, 4);
  for (int c = 0; c < 4; ++c) w.col(c) = testutil::random_normal(n, 190 + c);
  BlockMoments m2 = zero_block_moments(plan);
  add_block_moments(plan, u, w, 1.0, m2);
  const auto f = assemble_precision_factor(k, plan, x);
  double cross = 0.0;
  for (int c = 0; c < 4; ++c) cross += u.col(c).dot(precision_matvec(f, w.col(c)));
  CHECK(rel(vecchia_moment_parts<double>(k, plan, x, m2).qf, cross) <= 1e-10);
  // Dense submatrices: C = u u^T gives the same as the outer products.
  BlockMoments m3 = zero_block_moments(plan);
  add_block_submatrices(plan, 0.5 * u * u.transpose(), 1.0, m3);
  CHECK(rel(vecchia_moment_parts<double>(k, plan, x, m3).qf, want) <= 1e-10);
}

TEST_CASE("dual-number gradients of the blockwise likelihood") {
  const KernelModel shape = iso(2.0, 0.1, 1.4);
  const Locations x = testutil::random_locations(80, 2, 3);
  const Eigen::VectorXd y = testutil::random_normal(80, 4);
  const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::nearest(6));
  const NoiseModel nshape = testutil::nugget(0.2);
  Eigen::VectorXd theta(4);
  theta << pack_kernel(shape), pack_noise(nshape);
  using G = Grad<4>;
  std::vector<G> t(4);
  for (int i = 0; i < 4; ++i) t[i] = G::variable(theta(i), i);
  const auto kp = unpack_kernel<G>(std::span<const G>(t.data(), 3), shape);
  const auto np = unpack_noise<G>(std::span<const G>(t.data() + 3, 1), nshape);
  const auto parts = vecchia_nll_parts<G>(kp, &np, plan, x, y);
  const G total = parts.det + parts.qf;
  auto f = [&](const Eigen::VectorXd& th) {
    const KernelModel kk = unpack_kernel(Eigen::VectorXd(th.head(3)), shape);
    const NoiseModel nn = unpack_noise(Eigen::VectorXd(th.tail(1)), nshape);
    const auto p = vecchia_nll_parts(kk, &nn, plan, x, y);
    return p.det + p.qf;
  };
  CHECK(total.v == doctest::Approx(f(theta)).epsilon(1e-14));
  for (int i = 0; i < 4; ++i) {
    const double h = 1e-6;
    Eigen::VectorXd tp = theta, tm = theta;
    tp(i) += h;
    tm(i) -= h;
    CHECK(total.d[i] == doctest::Approx((f(tp) - f(tm)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("coincident points are reported") {
  Locations x(3, 2);
  x << 0.1, 0.1, 0.5, 0.5, 0.1, 0.1;
  const VecchiaPlan plan = build_conditioning(x, {0, 1, 2}, ConditioningMode::nearest(2));
  try {
    vecchia_nll(iso(1.0, 0.1, 1.0), nullptr, plan, x, Eigen::VectorXd::Ones(3));
    FAIL("expected a failure");
  } catch (const NotPositiveDefinite& e) {
    CHECK(std::string(e.what()).find("coincident") != std::string::npos);
  }
}

TEST_CASE("block reductions do not depend on the thread count") {
  const KernelModel k = iso(10.0, 0.05, 2.25);
  const Locations x = testutil::random_locations(400, 2, 71);
  const Eigen::VectorXd y = testutil::random_normal(400, 72);
  const VecchiaPlan plan = build_conditioning(x, maximin_order(x), ConditioningMode::nearest(10));
  const NoiseModel r = testutil::nugget(0.25);
  set_num_threads(1);
  const double a = vecchia_nll(k, &r, plan, x, y);
  set_num_threads(3);
  const double b = vecchia_nll(k, &r, plan, x, y);
  set_num_threads(1);
  CHECK(a == b);
}
