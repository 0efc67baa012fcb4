#include "doctest.h"
#include "oracles.hpp"

#include "fwdeq/assembly.hpp"

#include <random>

using namespace fwdeq;

namespace {

PowerPlant plant(const std::string& fuel, double cap) {
  PowerPlant p;
  p.id = "r";
  p.fuel = fuel;
  p.capacity_max = cap;
  p.ramp_up = cap;
  p.ramp_down = -cap;
  p.efficiency = 0.5;
  p.emission_intensity = 0.4;
  return p;
}

MarketInstance spot_market(std::size_t deliveries, std::vector<PowerPlant> plants) {
  MarketInstance m;
  std::vector<double> t;
  std::vector<std::vector<double>> ladders;
  for (std::size_t j = 0; j < deliveries; ++j) {
    t.push_back(1.0 + static_cast<double>(j));
    ladders.push_back({t.back()});
  }
  m.grid = ContractGrid::build(t, ladders);
  m.fuels = {"gas"};
  m.producers.push_back({"P", 1e-6, std::move(plants)});
  m.consumers.push_back({"C", 1e-6, 1.0, 0.0});
  oracle::fill_flat(m, 20.0, 5.0, 10.0, 1.0);
  return m;
}

Matrix dense(const SparseMatrix& s) { return Matrix(s); }

}  // namespace

TEST_CASE("pure trader with a single spot contract") {
  auto m = spot_market(1, {});
  m.trade_bound = 7.0;
  const auto blk = producer_blocks(m.producers[0], m);
  CHECK(blk.dim == 3);  // V, F, O
  REQUIRE(blk.eq.rows() == 3);
  const Matrix a = dense(blk.eq);
  CHECK(a(0, 0) == 1.0);  // balance row: V only
  CHECK(a.row(0).tail(2).isZero());
  CHECK(blk.eq_rhs.isZero());
  REQUIRE(blk.ineq.rows() == 2);
  const Matrix b = dense(blk.ineq);
  CHECK(b(0, 0) == 1.0);
  CHECK(b(1, 0) == -1.0);
  CHECK(blk.ineq_rhs[0] == 7.0);
  CHECK(blk.ineq_rhs[1] == 7.0);
}

TEST_CASE("producer equality rows: |J|(|L|+1)+1") {
  const auto m = spot_market(2, {plant("gas", 100.0)});
  const auto blk = producer_blocks(m.producers[0], m);
  CHECK(blk.eq.rows() == 5);
  CHECK(blk.eq_rhs.isZero());
  // V(2) F(2) O(2) W(2)
  REQUIRE(blk.dim == 8);
  const Matrix a = dense(blk.eq);
  CHECK(a(0, 0) == 1.0);
  CHECK(a(0, 6) == 1.0);
  CHECK(a(2, 2) == 1.0);
  CHECK(a(2, 6) == -0.5);
  CHECK(a(4, 4) == 1.0);
  CHECK(a(4, 5) == 1.0);
  CHECK(a(4, 6) == doctest::Approx(-0.4));
  CHECK(a(4, 7) == doctest::Approx(-0.4));
  CHECK(blk.eq_family[0] == ConstraintFamily::volume_balance);
  CHECK(blk.eq_family[2] == ConstraintFamily::fuel_cover);
  CHECK(blk.eq_family[4] == ConstraintFamily::emissions);
}

TEST_CASE("ramp and capacity row counts over three deliveries") {
  auto pl = plant("gas", 100.0);
  pl.ramp_up = 30.0;
  pl.ramp_down = -20.0;
  const auto m = spot_market(3, {pl});
  const auto blk = producer_blocks(m.producers[0], m);
  int ramp = 0, capacity = 0, trade = 0;
  for (auto f : blk.ineq_family) {
    ramp += f == ConstraintFamily::ramp;
    capacity += f == ConstraintFamily::capacity;
    trade += f == ConstraintFamily::trade_bound;
  }
  CHECK(ramp == 4);
  CHECK(capacity == 6);
  CHECK(trade == 6);
  // W1 - W0 <= 30 and W0 - W1 <= 20
  const Matrix b = dense(blk.ineq);
  const Eigen::Index w0 = 9;
  CHECK(b(0, w0 + 1) == 1.0);
  CHECK(b(0, w0) == -1.0);
  CHECK(blk.ineq_rhs[0] == 30.0);
  CHECK(b(1, w0) == 1.0);
  CHECK(blk.ineq_rhs[1] == 20.0);
}

TEST_CASE("unknown plant fuel is rejected") {
  auto m = spot_market(1, {plant("oil", 10.0)});
  CHECK_THROWS_AS(producer_blocks(m.producers[0], m), ModelError);
}

TEST_CASE("producer linear term holds discounted fuel and emission prices") {
  auto m = spot_market(2, {plant("gas", 100.0)});
  m.curves.interest_rate = 0.1;
  const auto blk = producer_blocks(m.producers[0], m);
  CHECK(blk.linear.head(2).isZero());
  CHECK(blk.linear[2] == doctest::Approx(20.0 * std::exp(-0.1)));
  CHECK(blk.linear[3] == doctest::Approx(20.0 * std::exp(-0.2)));
  CHECK(blk.linear[5] == doctest::Approx(5.0 * std::exp(-0.2)));
  CHECK(blk.linear.tail(2).isZero());
  const Matrix h = dense(blk.hessian());
  CHECK(h.bottomRows(2).isZero());
  CHECK(h.rightCols(2).isZero());
}

TEST_CASE("consumer blocks") {
  MarketInstance m;
  m.grid = ContractGrid::build({5.0}, {{1.0, 2.0, 3.0, 4.0, 5.0}});
  m.fuels = {"gas"};
  m.producers.push_back({"P", 1e-6, {}});
  m.consumers.push_back({"C", 1e-6, 0.4, 0.0});
  oracle::fill_flat(m, 1.0, 1.0, 50.0, 2.0);
  const auto blk = consumer_blocks(m.consumers[0], m);
  REQUIRE(blk.eq.rows() == 1);
  CHECK(blk.eq_rhs[0] == doctest::Approx(20.0));
  CHECK(dense(blk.eq).isApprox(Matrix::Ones(1, 5)));
  CHECK(blk.ineq_rhs.size() == 10);
  CHECK(blk.risk.isApprox(2.0 * Matrix::Identity(5, 5)));
  CHECK(blk.linear.isZero());
}

TEST_CASE("global assembly of a trader and a consumer at N = 1") {
  const auto m = spot_market(1, {});
  const auto g = assemble_global(m);
  CHECK(g.layout.dim == 3 + 1 + 1);
  const auto& p = g.problem;
  REQUIRE(g.clearing_rows.size == 1);
  const Matrix a = dense(p.A);
  const auto row = static_cast<Eigen::Index>(g.clearing_rows.offset);
  CHECK(a(row, 0) == 1.0);
  CHECK(a(row, 3) == 1.0);
  CHECK(a.row(row).sum() == 2.0);
  CHECK(p.pinned_duals == std::vector<std::size_t>{static_cast<std::size_t>(row)});
  const Matrix q = dense(p.Q);
  CHECK(q(4, 4) == 0.0);
  CHECK(q(0, 4) == 1.0);
  CHECK(q(3, 4) == 1.0);
}

TEST_CASE("structural invariants on random markets") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = oracle::random_market(rng);
    const auto g = assemble_global(m);
    const auto& p = g.problem;
    const auto n = static_cast<Eigen::Index>(m.grid.size());
    const auto nj = static_cast<Eigen::Index>(m.grid.deliveries());
    const auto nl = static_cast<Eigen::Index>(m.fuels.size());

    Eigen::Index expected_dim = n * static_cast<Eigen::Index>(m.consumers.size()) + n;
    Eigen::Index eq_rows = static_cast<Eigen::Index>(m.consumers.size()) * nj + n;
    Eigen::Index ineq_rows = 0;
    for (const auto& pr : m.producers) {
      const auto r = static_cast<Eigen::Index>(pr.plants.size());
      expected_dim += n + n * nl + n + nj * r;
      eq_rows += nj * (nl + 1) + 1;
      ineq_rows += producer_blocks(pr, m).ineq.rows();
    }
    for (const auto& c : m.consumers) ineq_rows += consumer_blocks(c, m).ineq.rows();
    CHECK(p.dim() == expected_dim);
    CHECK(p.A.rows() == eq_rows);
    CHECK(p.B.rows() == ineq_rows);

    const Matrix q = dense(p.Q);
    CHECK((q - q.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const auto price = static_cast<Eigen::Index>(g.layout.price.offset);
    CHECK(q.block(price, price, n, n).isZero());
    CHECK(dense(p.A).middleCols(price, n).isZero());

    CHECK(min_clearing_curvature(g, 1000, 100 + static_cast<std::uint64_t>(trial)) >= -1e-10);
  }
}

TEST_CASE("with a common lambda, x^T Q x on the clearing subspace is the sum of player risks") {
  std::mt19937_64 rng(5);
  auto m = oracle::random_market(rng);
  const double lambda = 3e-4;
  for (auto& p : m.producers) p.risk_aversion = lambda;
  for (auto& c : m.consumers) c.risk_aversion = lambda;
  const auto g = assemble_global(m);
  const auto& layout = g.layout;

  std::normal_distribution<double> gauss;
  Vector x = Vector::NullaryExpr(g.problem.dim(), [&](Eigen::Index) { return gauss(rng); });
  // Make the consumer absorb the net position so the clearing rows hold.
  const auto n = static_cast<Eigen::Index>(m.grid.size());
  Vector net = Vector::Zero(n);
  for (const auto& s : layout.producers) net += x.segment(static_cast<Eigen::Index>(s.v.offset), n);
  for (std::size_t c = 1; c < layout.consumers.size(); ++c) {
    net += x.segment(static_cast<Eigen::Index>(layout.consumers[c].v.offset), n);
  }
  x.segment(static_cast<Eigen::Index>(layout.consumers[0].v.offset), n) = -net;

  double expected = 0.0;
  for (std::size_t p = 0; p < m.producers.size(); ++p) {
    const auto blk = producer_blocks(m.producers[p], m);
    const Vector v = x.segment(static_cast<Eigen::Index>(layout.producers[p].v.offset),
                               static_cast<Eigen::Index>(blk.dim));
    expected += lambda * v.dot(blk.hessian() * v);
  }
  for (std::size_t c = 0; c < m.consumers.size(); ++c) {
    const auto blk = consumer_blocks(m.consumers[c], m);
    const Vector v = x.segment(static_cast<Eigen::Index>(layout.consumers[c].v.offset), n);
    expected += lambda * v.dot(blk.risk * v);
  }
  CHECK(x.dot(g.problem.Q * x) == doctest::Approx(expected).epsilon(1e-10));
}
