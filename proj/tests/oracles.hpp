#pragma once

// Independent reference computations used only by the tests.

#include "fwdeq/model.hpp"

#include <optional>
#include <random>

namespace fwdeq::oracle {

struct DenseQp {
  Matrix Q;
  Vector pi;
  Matrix A;
  Vector a;
  Matrix B;
  Vector b;
};

struct DenseKktPoint {
  Vector x;
  Vector mu;
  Vector eta;
  double objective = 0.0;
};

/// Enumerates every subset of inequality rows as the active set, solves the
/// equality-constrained KKT system for each and keeps the best point that is
/// primal and dual feasible. Exponential; only for tiny problems.
std::optional<DenseKktPoint> brute_force_qp(const DenseQp& qp);

/// Random strictly convex QP with a strictly feasible interior.
DenseQp random_strictly_convex_qp(std::mt19937_64& rng, int n, int eq_rows, int ineq_rows);

/// Literal double-sum evaluation of the forward-from-futures relation.
std::vector<double> forwards_literal(const std::vector<double>& futures,
                                     const std::vector<double>& times, double delivery,
                                     double rate);

struct RandomMarketLimits {
  int max_producers = 3;
  int max_consumers = 2;
  int max_contracts = 10;
};

/// Small random market satisfying the strict-feasibility assumption: demand
/// below 60% of fleet capacity, generous ramps and a trade bound well above
/// any position.
MarketInstance random_market(std::mt19937_64& rng, const RandomMarketLimits& limits = {});

/// Flat curves and an identity-scaled covariance for a hand-built market whose
/// grid, fuels and players are already set.
void fill_flat(MarketInstance& m, double fuel_price, double emission_price, double demand,
               double variance);

/// Random symmetric positive definite matrix with eigenvalues in [lo, hi].
Matrix random_spd(std::mt19937_64& rng, int n, double lo, double hi);

}  // namespace fwdeq::oracle
