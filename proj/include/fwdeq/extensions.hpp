#pragma once

#include "fwdeq/assembly.hpp"
#include "fwdeq/model.hpp"
#include "fwdeq/qp.hpp"

#include <span>
#include <vector>

namespace fwdeq {

// ---- forwards and futures -------------------------------------------------

/// Expected forward prices on one delivery's ladder from expected futures
/// prices. `times` are the ladder's trading times (the last one is the
/// delivery time). The forward at the last two ladder points always equals the
/// terminal future because the increment weight e^{-r t_{k+1}} / e^{-r T} is
/// one for t_{k+1} = T.
std::vector<double> forwards_from_futures(std::span<const double> futures,
                                          std::span<const double> times, double rate);

/// Inverse of forwards_from_futures by back-substitution. Where the pivot
/// 1 - e^{-r t_{i+1}} / e^{-r T} vanishes (always at the second-to-last point,
/// everywhere when r = 0) the future is not identified by the forwards; it is
/// set equal to the next future.
std::vector<double> futures_from_forwards(std::span<const double> forwards,
                                          std::span<const double> times, double rate);

/// Grid-aware variants; throw ModelError when the ladder length differs from
/// the grid's ladder for delivery j.
Vector forwards_from_futures(const Vector& futures, double rate, const ContractGrid& grid,
                             std::size_t j);
Vector futures_from_forwards(const Vector& forwards, double rate, const ContractGrid& grid,
                             std::size_t j);

// ---- block contracts ------------------------------------------------------

struct BlockContract {
  std::vector<std::size_t> deliveries;  // covered delivery indices J'
  std::vector<double> trading_times;    // must lie on every covered ladder
};

/// Merges every (trading time, covered delivery) contract of each block into
/// one tradable contract. Throws ModelError for empty blocks, trading times
/// missing from a covered ladder, or blocks that claim the same contract.
MarketInstance apply_block_contracts(const MarketInstance& market,
                                     const std::vector<BlockContract>& blocks);

/// Per-tradable sums of a per-contract vector.
Vector merge_to_tradables(const Vector& per_contract, const TradableMap& map);

// ---- trading costs --------------------------------------------------------

struct SplitProblem {
  QpProblem problem;
  std::vector<Slice> minus;  // sell-leg slices, appended after the original x
  Slice bound_rows;          // appended inequality rows, 4 per split variable
};

/// Rewrites each slice V as V+ - V- with 0 <= V+, V- <= bound. The existing
/// slice holds V+. Expected utility loses eps (V+ + V-) + ups (V+ - V-)^2.
/// Appended bound rows per slice entry t: V+ <= bound, -V+ <= 0, V- <= bound,
/// -V- <= 0.
SplitProblem split_trading_volumes(const QpProblem& problem, const std::vector<Slice>& slices,
                                   const Vector& eps, const Vector& ups, double bound);

/// Applies market.costs to the stacked problem: every player's volume slice
/// is split. Throws ModelError if the market has no or invalid costs.
AssembledQP apply_transaction_costs(const AssembledQP& qp, const MarketInstance& market);

}  // namespace fwdeq
