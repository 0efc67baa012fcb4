#pragma once

#include "fwdeq/model.hpp"
#include "fwdeq/qp.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fwdeq {

enum class ConstraintFamily {
  volume_balance,  // sold electricity equals production, per delivery
  fuel_cover,      // fuel bought covers production, per fuel and delivery
  emissions,       // certificates cover emissions over the horizon
  demand,          // consumer share of demand, per delivery
  clearing,        // long and short positions match, per contract
  ramp,
  capacity,
  trade_bound,
  split_bound,     // bounds on buy/sell legs when trading costs are present
};

std::string to_string(ConstraintFamily family);

/// Constraint and objective data of one player over its own variables.
///
/// Producer variables are [V | F | O | W]; consumer variables are [V].
/// Equalities are `eq * v = eq_rhs`, inequalities `ineq * v <= ineq_rhs`.
/// Q_k is block diagonal with `risk` over [V | F | O] and a zero W block.
struct PlayerBlocks {
  SparseMatrix eq;
  Vector eq_rhs;
  std::vector<ConstraintFamily> eq_family;
  SparseMatrix ineq;
  Vector ineq_rhs;
  std::vector<ConstraintFamily> ineq_family;
  Matrix risk;
  Vector linear;  // pi_{0,k}: discounted fuel/emission prices, zero elsewhere
  std::size_t dim = 0;

  SparseMatrix hessian() const;
};

/// Throws ModelError for plants with unknown fuels.
PlayerBlocks producer_blocks(const Producer& producer, const MarketInstance& market);
PlayerBlocks consumer_blocks(const Consumer& consumer, const MarketInstance& market);

struct RowTag {
  ConstraintFamily family;
  int player;  // producers first, then consumers; -1 for clearing rows
};

/// The stacked problem: max -pi^T x - 1/2 x^T Q x, A x = a, B x <= b, with
/// the clearing-row multipliers pinned to zero.
struct AssembledQP {
  QpProblem problem;
  VariableLayout layout;
  Slice clearing_rows;
  std::vector<RowTag> eq_tags;
  std::vector<RowTag> ineq_tags;
  std::vector<Slice> player_eq_rows;    // per player, producers then consumers
  std::vector<Slice> player_ineq_rows;  // per player
  std::vector<Slice> player_split_rows; // per player, empty without trading costs
};

AssembledQP assemble_global(const MarketInstance& market);

/// Smallest value of x^T Q x / (||x||^2 ||Q||_max) over random vectors
/// projected onto the clearing subspace.
double min_clearing_curvature(const AssembledQP& qp, int samples, std::uint64_t seed);

}  // namespace fwdeq
