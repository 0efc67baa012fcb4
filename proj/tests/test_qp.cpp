#include "doctest.h"
#include "oracles.hpp"

#include "fwdeq/qp.hpp"

#include <random>

using namespace fwdeq;

namespace {

SparseMatrix sparse(const Matrix& m) { return m.sparseView(0.0, 0.0); }

QpProblem from_dense(const oracle::DenseQp& d) {
  QpProblem p;
  p.Q = sparse(d.Q);
  p.pi = d.pi;
  p.A = sparse(d.A);
  p.a = d.a;
  p.B = sparse(d.B);
  p.b = d.b;
  return p;
}

oracle::DenseQp dense(Matrix Q, Vector pi, Matrix A, Vector a, Matrix B, Vector b) {
  return {std::move(Q), std::move(pi), std::move(A), std::move(a), std::move(B), std::move(b)};
}

}  // namespace

TEST_CASE("unconstrained scalar quadratic") {
  const auto p = from_dense(dense(Matrix::Ones(1, 1), Vector::Constant(1, -1.0), Matrix(0, 1),
                                  Vector(0), Matrix(0, 1), Vector(0)));
  const auto s = solve_dual_form(p);
  REQUIRE(s.status == QpStatus::optimal);
  CHECK(s.x[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.objective == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("equality constrained toy: x = (1/2, 1/2), mu = -1/2") {
  Matrix A(1, 2);
  A << 1, 1;
  const auto p = from_dense(dense(Matrix::Identity(2, 2), Vector::Zero(2), A,
                                  Vector::Constant(1, 1.0), Matrix(0, 2), Vector(0)));
  const auto s = solve_dual_form(p);
  REQUIRE(s.status == QpStatus::optimal);
  CHECK(s.x[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.x[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.eq_duals[0] == doctest::Approx(-0.5).epsilon(1e-12));

  const auto rep = kkt_residuals(p, s.x, s.eq_duals, s.ineq_duals);
  CHECK(rep.worst() <= 1e-9);

  SUBCASE("perturbing x by 1e-3 moves stationarity by 1e-3") {
    Vector x = s.x;
    x[0] += 1e-3;
    const auto r = kkt_residuals(p, x, s.eq_duals, s.ineq_duals);
    CHECK(r.stationarity == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(r.primal_eq == doctest::Approx(1e-3).epsilon(1e-6));
  }
}

TEST_CASE("single active inequality: x = 0, eta = 1") {
  const auto p = from_dense(dense(Matrix::Ones(1, 1), Vector::Constant(1, -1.0), Matrix(0, 1),
                                  Vector(0), Matrix::Ones(1, 1), Vector::Zero(1)));
  const auto s = solve_dual_form(p);
  REQUIRE(s.status == QpStatus::optimal);
  CHECK(std::abs(s.x[0]) <= 1e-10);
  CHECK(s.ineq_duals[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(s.kkt.complementarity <= 1e-10);
}

TEST_CASE("negative multiplier is reported through dual_feas") {
  const auto p = from_dense(dense(Matrix::Ones(1, 1), Vector::Zero(1), Matrix(0, 1), Vector(0),
                                  Matrix::Ones(1, 1), Vector::Ones(1)));
  const auto r = kkt_residuals(p, Vector::Zero(1), Vector(0), Vector::Constant(1, -0.25));
  CHECK(r.dual_feas == doctest::Approx(-0.25));
  CHECK(r.worst() >= 0.25);
}

TEST_CASE("interior point matches active-set enumeration on random strictly convex QPs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + trial % 7;
    const int me = trial % 3 == 0 ? 0 : std::min(n - 1, 1 + trial % 2);
    const int mi = 1 + trial % 6;
    const auto d = oracle::random_strictly_convex_qp(rng, n, me, mi);
    const auto ref = oracle::brute_force_qp(d);
    REQUIRE(ref.has_value());
    const auto s = solve_dual_form(from_dense(d));
    REQUIRE(s.status == QpStatus::optimal);
    CHECK((s.x - ref->x).cwiseAbs().maxCoeff() <= 1e-7);
    CHECK(s.objective == doctest::Approx(ref->objective).epsilon(1e-8));
  }
}

TEST_CASE("scaling (Q, pi) by s keeps x and scales the multipliers") {
  std::mt19937_64 rng(11);
  const auto d = oracle::random_strictly_convex_qp(rng, 5, 2, 4);
  auto p = from_dense(d);
  const auto base = solve_dual_form(p);
  REQUIRE(base.status == QpStatus::optimal);
  const double scale = 7.5;
  p.Q *= scale;
  p.pi *= scale;
  const auto scaled = solve_dual_form(p);
  REQUIRE(scaled.status == QpStatus::optimal);
  CHECK((scaled.x - base.x).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((scaled.eq_duals - scale * base.eq_duals).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK((scaled.ineq_duals - scale * base.ineq_duals).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("pinned multipliers: clearing-type structure") {
  // Two players trade one contract with price variable p; the clearing row has
  // its multiplier pinned. Player utilities: -(p) v1 - 1/2 v1^2 + 2 v1 and
  // -(p) v2 - 1/2 v2^2 (a price taker who buys below 0 and sells above).
  // Stacked: x = (v1, v2, p), Q = [[1,0,1],[0,1,1],[1,1,0]], pi = (-2, 0, 0).
  Matrix Q(3, 3);
  Q << 1, 0, 1, 0, 1, 1, 1, 1, 0;
  Vector pi(3);
  pi << -2, 0, 0;
  Matrix A(1, 3);
  A << 1, 1, 0;
  QpProblem p = from_dense(dense(Q, pi, A, Vector::Zero(1), Matrix(0, 3), Vector(0)));
  p.pinned_duals = {0};
  const auto s = solve_dual_form(p);
  REQUIRE(s.status == QpStatus::optimal);
  // Best responses: v1 = 2 - p, v2 = -p; clearing gives p = 1, v = (1, -1).
  CHECK(s.x[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(s.x[1] == doctest::Approx(-1.0).epsilon(1e-10));
  CHECK(s.x[2] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(s.eq_duals[0] == 0.0);
  CHECK(s.kkt.worst() <= 1e-10);
}

TEST_CASE("phase 1") {
  SUBCASE("symmetric box") {
    Matrix B(2, 1);
    B << 1, -1;
    const auto r = phase1_feasible(SparseMatrix(0, 1), Vector(0), sparse(B), Vector::Ones(2));
    CHECK(std::abs(r.point[0]) <= 1e-8);
    CHECK(r.margin == doctest::Approx(-1.0).epsilon(1e-8));
    CHECK(r.strictly_feasible());
  }
  SUBCASE("equality contradicts the box") {
    const auto r = phase1_feasible(sparse(Matrix::Ones(1, 1)), Vector::Constant(1, 5.0),
                                   sparse(Matrix::Ones(1, 1)), Vector::Ones(1));
    CHECK(r.margin == doctest::Approx(4.0).epsilon(1e-8));
    CHECK_FALSE(r.strictly_feasible());
  }
  SUBCASE("consumer demand exceeds five trade bounds") {
    // sum of 5 volumes = 100 with |V| <= 10: the smallest worst violation is 10.
    Matrix A = Matrix::Ones(1, 5);
    Matrix B(10, 5);
    B << Matrix::Identity(5, 5), -Matrix::Identity(5, 5);
    const auto r = phase1_feasible(sparse(A), Vector::Constant(1, 100.0), sparse(B),
                                   Vector::Constant(10, 10.0));
    CHECK(r.margin == doctest::Approx(10.0).epsilon(1e-8));
  }
  SUBCASE("inconsistent equalities are rejected") {
    Matrix A(2, 1);
    A << 1, 1;
    Vector a(2);
    a << 1, 2;
    CHECK_THROWS_AS(phase1_feasible(sparse(A), a, SparseMatrix(0, 1), Vector(0)),
                    InconsistentEqualities);
  }
}

TEST_CASE("an optimal triple passing the residual check reproduces the optimum value") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto d = oracle::random_strictly_convex_qp(rng, 6, 2, 5);
    const auto p = from_dense(d);
    const auto s = solve_dual_form(p);
    REQUIRE(s.status == QpStatus::optimal);
    const auto rep = kkt_residuals(p, s.x, s.eq_duals, s.ineq_duals);
    if (rep.worst() <= 1e-10) {
      const auto ref = oracle::brute_force_qp(d);
      CHECK(s.objective == doctest::Approx(ref->objective).epsilon(1e-8));
    }
  }
}
