#pragma once

#include "fwdeq/assembly.hpp"
#include "fwdeq/model.hpp"
#include "fwdeq/qp.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace fwdeq {

/// Raised when a player's (or the joint) feasible set has no strictly
/// feasible point.
class InfeasibleMarket : public std::runtime_error {
 public:
  InfeasibleMarket(std::string player, ConstraintFamily family, double margin);
  const std::string& player() const { return player_; }
  ConstraintFamily family() const { return family_; }
  double margin() const { return margin_; }

 private:
  std::string player_;
  ConstraintFamily family_;
  double margin_;
};

class SolverFailure : public std::runtime_error {
 public:
  SolverFailure(const std::string& what, QpStatus status, KktReport report)
      : std::runtime_error(what), status(status), report(report) {}
  QpStatus status;
  KktReport report;
};

struct EquilibriumOptions {
  QpOptions qp{1e-10, 200, 1e-9, 3, true};
  bool check_feasibility = true;  // phase 1 per player and jointly
  bool check_uniqueness = true;
};

/// A player's variables in the producer_blocks / consumer_blocks order, with
/// net volumes in the V slot. Buy and sell legs are kept when costs apply.
struct PlayerPosition {
  std::string id;
  bool producer = false;
  Vector v;
  Vector buy;   // empty without trading costs
  Vector sell;  // empty without trading costs
};

struct EquilibriumSolution {
  Vector prices;            // expected undiscounted price per grid contract
  Vector tradable_prices;   // discounted price slice, one per tradable
  std::vector<PlayerPosition> positions;  // producers then consumers
  std::vector<double> utilities;          // gross
  std::vector<double> retail_utilities;   // consumers add s_c p_c sum D; producers unchanged
  double clearing_residual = 0.0;
  bool possibly_nonunique = false;
  QpSolution raw;
  AssembledQP qp;

  std::size_t players() const { return positions.size(); }
};

/// Throws InfeasibleMarket, SolverFailure, or ModelError (invalid market).
EquilibriumSolution solve_equilibrium(const MarketInstance& market,
                                      const EquilibriumOptions& options = {});

/// Single-player problem at fixed discounted tradable prices. Variables are
/// the player's own [V | F | O | W] (or [V]) followed by the sell leg when
/// trading costs apply.
struct PlayerProblem {
  QpProblem problem;
  Slice v;
  Slice v_minus;  // size 0 without costs
  double risk_aversion = 0.0;
};

PlayerProblem player_problem(const MarketInstance& market, std::size_t player,
                             const Vector& tradable_prices);

std::size_t player_count(const MarketInstance& market);
std::string player_id(const MarketInstance& market, std::size_t player);

/// -E[pi_k]^T v - 1/2 lambda_k v^T Q_k v, minus trading costs eps|V| + ups V^2
/// when the market has them. `v` is in the player's own variable order with
/// net volumes; prices are discounted tradable prices.
double player_utility(const MarketInstance& market, std::size_t player, const Vector& v,
                      const Vector& tradable_prices);

struct BestResponse {
  PlayerPosition position;
  double utility = 0.0;
  QpSolution raw;
};

/// Throws InfeasibleMarket when the player's own problem is infeasible.
BestResponse best_response(const MarketInstance& market, std::size_t player,
                           const Vector& tradable_prices, const QpOptions& options = {1e-10});

/// The player's own KKT residuals at the stacked solution, using the player's
/// rows of (x, mu, eta) from the global solve.
KktReport player_kkt(const MarketInstance& market, const EquilibriumSolution& solution,
                     std::size_t player);

struct NashReport {
  std::vector<double> gaps;           // utility(best response) - utility(equilibrium)
  std::vector<double> relative_gaps;  // gap / (1 + |utility|)
  double max_gap = 0.0;               // max relative gap
  double clearing_residual = 0.0;
  double pinned = 0.0;
  bool pass = false;
};

/// Pass requires every relative gap in [-tol, tol], clearing residual at most
/// 1e-8 (1 + sum D) and pinned multipliers exactly zero.
NashReport verify_nash(const MarketInstance& market, const EquilibriumSolution& solution,
                       double tol = 1e-6);

}  // namespace fwdeq
