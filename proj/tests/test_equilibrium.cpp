#include "doctest.h"
#include "oracles.hpp"

#include "fwdeq/equilibrium.hpp"

#include <random>

using namespace fwdeq;

namespace {

PowerPlant plant(const std::string& id, double cap, double c, double g) {
  PowerPlant p;
  p.id = id;
  p.fuel = "gas";
  p.capacity_max = cap;
  p.ramp_up = cap;
  p.ramp_down = -cap;
  p.efficiency = c;
  p.emission_intensity = g;
  return p;
}

// Spot-only market with one producer and one consumer; gas 20, emissions 5.
MarketInstance spot_market(std::vector<PowerPlant> plants, double demand, double variance = 1.0) {
  MarketInstance m;
  m.grid = ContractGrid::build({1.0}, {{1.0}});
  m.fuels = {"gas"};
  m.producers.push_back({"P", 1e-6, std::move(plants)});
  m.consumers.push_back({"C", 1e-6, 1.0, 0.0});
  oracle::fill_flat(m, 20.0, 5.0, demand, variance);
  m.trade_bound = 1000.0;
  return m;
}

}  // namespace

TEST_CASE("risk-neutral limit prices at marginal cost") {
  // c G + g G_em = 0.5 * 20 + 0.4 * 5 = 12
  const auto m = spot_market({plant("a", 100.0, 0.5, 0.4)}, 50.0);
  const auto sol = solve_equilibrium(m);
  CHECK(sol.prices[0] == doctest::Approx(12.0).epsilon(0.01));

  // Independent check: bisection on the price until the producer's best
  // response sells exactly the demand.
  double lo = 0.0, hi = 100.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const auto br = best_response(m, 0, Vector::Constant(1, mid));
    (-br.position.v[0] < 50.0 ? lo : hi) = mid;
  }
  CHECK(sol.prices[0] == doctest::Approx(0.5 * (lo + hi)).epsilon(1e-4));
  CHECK(sol.positions[1].v[0] == doctest::Approx(50.0));
  CHECK(sol.positions[0].v[0] == doctest::Approx(-50.0));
}

TEST_CASE("empty market") {
  auto m = spot_market({}, 0.0);
  const auto sol = solve_equilibrium(m);
  CHECK(sol.clearing_residual <= 1e-12);
  for (const auto& p : sol.positions) CHECK(p.v.cwiseAbs().maxCoeff() <= 1e-9);
  for (double u : sol.utilities) CHECK(std::abs(u) <= 1e-9);
}

TEST_CASE("player utility") {
  const auto m = spot_market({}, 10.0, 4.0);
  const Vector price = Vector::Constant(1, 30.0);
  CHECK(player_utility(m, 1, Vector::Zero(1), price) == 0.0);
  // consumer forced to buy D = 10 at 30 with sigma^2 = 4
  const double expected = -30.0 * 10.0 - 0.5 * 1e-6 * 100.0 * 4.0;
  CHECK(player_utility(m, 1, Vector::Constant(1, 10.0), price) == doctest::Approx(expected));
  auto linear = m;
  linear.consumers[0].risk_aversion = 0.0;
  CHECK(player_utility(linear, 1, Vector::Constant(1, -7.0 / 30.0), price) == doctest::Approx(7.0));
}

TEST_CASE("best responses") {
  const auto m = spot_market({plant("a", 100.0, 0.5, 0.4)}, 40.0);
  SUBCASE("consumer volume is fixed by demand") {
    for (double p : {-5.0, 0.0, 500.0}) {
      const auto br = best_response(m, 1, Vector::Constant(1, p));
      CHECK(br.position.v[0] == doctest::Approx(40.0));
    }
  }
  SUBCASE("below marginal cost the plant stays off") {
    const auto br = best_response(m, 0, Vector::Constant(1, 11.0));
    CHECK(std::abs(br.position.v[0]) <= 1e-6);
    CHECK(std::abs(br.position.v[3]) <= 1e-6);  // W
  }
  SUBCASE("above marginal cost the plant runs at capacity") {
    const auto br = best_response(m, 0, Vector::Constant(1, 13.0));
    CHECK(br.position.v[3] == doctest::Approx(100.0).epsilon(1e-6));
    CHECK(br.position.v[0] == doctest::Approx(-100.0).epsilon(1e-6));
  }
}

TEST_CASE("stacked solution satisfies every player's KKT system and the Nash property") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 15; ++trial) {
    const auto m = oracle::random_market(rng);
    const auto sol = solve_equilibrium(m);
    const double demand = m.curves.demand.sum();
    CHECK(sol.clearing_residual <= 1e-8 * (1.0 + demand));
    CHECK(sol.raw.kkt.pinned == 0.0);
    for (std::size_t k = 0; k < sol.players(); ++k) {
      const auto r = player_kkt(m, sol, k);
      CHECK(r.worst() <= 1e-7);
    }
    const auto nash = verify_nash(m, sol);
    CHECK(nash.pass);
    CHECK(nash.max_gap <= 1e-6);

    // Stationarity in the price slice is the clearing equation.
    const auto& p = sol.qp.problem;
    const auto price = static_cast<Eigen::Index>(sol.qp.layout.price.offset);
    const auto nt = static_cast<Eigen::Index>(sol.qp.layout.price.size);
    const Vector grad = (p.Q * sol.raw.x + p.pi + SparseMatrix(p.A.transpose()) * sol.raw.eq_duals +
                         SparseMatrix(p.B.transpose()) * sol.raw.ineq_duals)
                            .segment(price, nt);
    Vector net = Vector::Zero(nt);
    for (const auto& pos : sol.positions) net += pos.v.head(nt);
    CHECK((grad - net).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + demand));
  }
}

TEST_CASE("a single consumer buys its share whatever its risk aversion") {
  auto m = spot_market({plant("a", 100.0, 0.5, 0.4), plant("b", 80.0, 0.7, 0.3)}, 60.0);
  for (double lambda : {1e-6, 1e-3, 1e-1}) {
    m.consumers[0].risk_aversion = lambda;
    const auto sol = solve_equilibrium(m);
    CHECK(sol.positions[1].v[0] == doctest::Approx(60.0).epsilon(1e-9));
  }
}

TEST_CASE("Nash verification detects deviations") {
  const auto m = spot_market({plant("a", 100.0, 0.5, 0.4), plant("b", 80.0, 0.7, 0.3)}, 60.0, 9.0);
  const auto sol = solve_equilibrium(m);

  SUBCASE("moving one contract never improves the producer") {
    Vector v = sol.positions[0].v;
    for (double d : {-1.0, 1.0}) {
      Vector w = v;
      w[0] += d;
      w[3] -= d;  // keep the volume balance with the cheaper plant
      w[1] = 0.5 * w[3] + 0.7 * w[4];
      w[2] = 0.4 * w[3] + 0.3 * w[4];
      CHECK(player_utility(m, 0, w, sol.tradable_prices) <= sol.utilities[0] + 1e-9);
    }
  }
  SUBCASE("prices ten percent off break the equilibrium") {
    auto wrong = sol;
    wrong.tradable_prices *= 1.1;
    for (std::size_t k = 0; k < wrong.players(); ++k) {
      const auto pos = wrong.positions[k].v;
      wrong.utilities[k] = player_utility(m, k, pos, wrong.tradable_prices);
    }
    const auto rep = verify_nash(m, wrong);
    CHECK_FALSE(rep.pass);
    CHECK(*std::max_element(rep.gaps.begin(), rep.gaps.end()) > 1e-3);
  }
}

TEST_CASE("price interval is flagged") {
  // Demand equals the cheap plant's capacity: any price between the two
  // marginal costs clears the market.
  auto flat = spot_market({plant("cheap", 50.0, 0.5, 0.4), plant("dear", 50.0, 0.9, 0.4)}, 50.0);
  CHECK(solve_equilibrium(flat).possibly_nonunique);
  auto interior = spot_market({plant("cheap", 50.0, 0.5, 0.4), plant("dear", 50.0, 0.9, 0.4)}, 30.0);
  CHECK_FALSE(solve_equilibrium(interior).possibly_nonunique);
}

TEST_CASE("infeasible markets name the player and constraint family") {
  SUBCASE("consumer demand beyond its trade bounds") {
    MarketInstance m;
    m.grid = ContractGrid::build({5.0}, {{1.0, 2.0, 3.0, 4.0, 5.0}});
    m.fuels = {"gas"};
    m.producers.push_back({"P", 1e-6, {plant("a", 200.0, 0.5, 0.4)}});
    m.consumers.push_back({"C", 1e-6, 1.0, 0.0});
    oracle::fill_flat(m, 20.0, 5.0, 100.0, 1.0);
    m.trade_bound = 10.0;
    try {
      solve_equilibrium(m);
      FAIL("expected an infeasible market");
    } catch (const InfeasibleMarket& e) {
      CHECK(e.player() == "consumer C");
      CHECK(e.family() == ConstraintFamily::trade_bound);
      CHECK(e.margin() == doctest::Approx(10.0).epsilon(1e-6));
    }
  }
  SUBCASE("demand beyond fleet capacity") {
    const auto m = spot_market({plant("a", 40.0, 0.5, 0.4)}, 50.0);
    try {
      solve_equilibrium(m);
      FAIL("expected an infeasible market");
    } catch (const InfeasibleMarket& e) {
      CHECK(e.player() == "the joint market");
      CHECK(e.family() == ConstraintFamily::capacity);
    }
  }
  SUBCASE("invalid markets are rejected before solving") {
    auto m = spot_market({}, 10.0);
    m.consumers[0].demand_share = 0.5;
    CHECK_THROWS_AS(solve_equilibrium(m), ModelError);
  }
}
