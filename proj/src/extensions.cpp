#include "fwdeq/extensions.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace fwdeq {

namespace {

void check_ladder(std::size_t values, std::span<const double> times) {
  if (values != times.size()) throw ModelError("ladder values and trading times differ in length");
  if (times.empty()) throw ModelError("empty ladder");
}

// e^{-r t} / e^{-r T}
double weight(double rate, double t, double delivery) { return std::exp(-rate * (t - delivery)); }

}  // namespace

std::vector<double> forwards_from_futures(std::span<const double> futures,
                                          std::span<const double> times, double rate) {
  check_ladder(futures.size(), times);
  const std::size_t m = futures.size();
  const double delivery = times.back();
  std::vector<double> out(m);
  double tail = 0.0;  // sum over k >= i of increment_k * weight_{k+1}
  out[m - 1] = futures[m - 1];
  for (std::size_t i = m - 1; i-- > 0;) {
    tail += (futures[i + 1] - futures[i]) * weight(rate, times[i + 1], delivery);
    out[i] = futures[i] + tail;
  }
  return out;
}

std::vector<double> futures_from_forwards(std::span<const double> forwards,
                                          std::span<const double> times, double rate) {
  check_ladder(forwards.size(), times);
  const std::size_t m = forwards.size();
  const double delivery = times.back();
  std::vector<double> out(m);
  out[m - 1] = forwards[m - 1];
  // forward_i - forward_{i+1} = (future_i - future_{i+1}) (1 - w_{i+1})
  for (std::size_t i = m - 1; i-- > 0;) {
    const double pivot = 1.0 - weight(rate, times[i + 1], delivery);
    if (std::abs(pivot) <= 1e-14) {
      out[i] = out[i + 1];
    } else {
      out[i] = out[i + 1] + (forwards[i] - forwards[i + 1]) / pivot;
    }
  }
  return out;
}

namespace {

std::span<const double> grid_ladder(const Vector& values, const ContractGrid& grid,
                                    std::size_t j) {
  if (j >= grid.deliveries()) throw ModelError("delivery index out of range");
  if (static_cast<std::size_t>(values.size()) != grid.ladder_size(j)) {
    throw ModelError("ladder for delivery " + std::to_string(j) + " needs " +
                     std::to_string(grid.ladder_size(j)) + " points");
  }
  return {values.data(), static_cast<std::size_t>(values.size())};
}

Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

Vector forwards_from_futures(const Vector& futures, double rate, const ContractGrid& grid,
                             std::size_t j) {
  const auto ladder = grid_ladder(futures, grid, j);
  return to_vector(forwards_from_futures(ladder, grid.trading_times(j), rate));
}

Vector futures_from_forwards(const Vector& forwards, double rate, const ContractGrid& grid,
                             std::size_t j) {
  const auto ladder = grid_ladder(forwards, grid, j);
  return to_vector(futures_from_forwards(ladder, grid.trading_times(j), rate));
}

MarketInstance apply_block_contracts(const MarketInstance& market,
                                     const std::vector<BlockContract>& blocks) {
  if (!market.tradable.of_contract.empty() && !market.tradable.is_identity()) {
    throw ModelError("block contracts were already applied to this market");
  }
  const auto& grid = market.grid;
  const std::size_t n = grid.size();
  constexpr std::size_t unclaimed = static_cast<std::size_t>(-1);

  // group id per contract; groups are (block, trading time) pairs
  std::vector<std::size_t> group(n, unclaimed);
  std::size_t groups = 0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string name = "block " + std::to_string(b);
    if (blk.deliveries.empty()) throw ModelError(name + " covers no deliveries");
    if (blk.trading_times.empty()) throw ModelError(name + " has no trading times");
    for (double t : blk.trading_times) {
      const std::size_t id = groups++;
      for (std::size_t j : blk.deliveries) {
        if (j >= grid.deliveries()) throw ModelError(name + " covers an unknown delivery");
        const auto ladder = grid.trading_times(j);
        const auto it = std::find(ladder.begin(), ladder.end(), t);
        if (it == ladder.end()) {
          throw ModelError(name + ": trading time " + std::to_string(t) +
                           " is not on the ladder of delivery " + std::to_string(j));
        }
        const std::size_t k = grid.offset(j) + static_cast<std::size_t>(it - ladder.begin());
        if (group[k] != unclaimed) {
          throw ModelError(name + " conflicts with another block on delivery " +
                           std::to_string(j) + " at trading time " + std::to_string(t));
        }
        group[k] = id;
      }
    }
  }

  MarketInstance out = market;
  out.tradable.of_contract.assign(n, 0);
  std::map<std::size_t, std::size_t> tradable_of_group;
  std::size_t count = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (group[k] == unclaimed) {
      out.tradable.of_contract[k] = count++;
      continue;
    }
    const auto [it, fresh] = tradable_of_group.try_emplace(group[k], count);
    if (fresh) ++count;
    out.tradable.of_contract[k] = it->second;
  }
  out.tradable.count = count;
  return out;
}

Vector merge_to_tradables(const Vector& per_contract, const TradableMap& map) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(map.count));
  for (std::size_t k = 0; k < map.of_contract.size(); ++k) {
    out[static_cast<Eigen::Index>(map.of_contract[k])] += per_contract[static_cast<Eigen::Index>(k)];
  }
  return out;
}

SplitProblem split_trading_volumes(const QpProblem& problem, const std::vector<Slice>& slices,
                                   const Vector& eps, const Vector& ups, double bound) {
  const auto old_dim = problem.dim();
  Eigen::Index extra = 0;
  for (const auto& s : slices) {
    if (static_cast<Eigen::Index>(s.size) != eps.size() ||
        static_cast<Eigen::Index>(s.size) != ups.size()) {
      throw ModelError("trading cost vectors do not match the volume slice");
    }
    extra += static_cast<Eigen::Index>(s.size);
  }
  if ((eps.array() < 0.0).any() || (ups.array() < 0.0).any()) {
    throw ModelError("trading costs must be non-negative");
  }
  const Eigen::Index dim = old_dim + extra;

  SplitProblem out;
  std::vector<Triplet> tt;
  for (Eigen::Index i = 0; i < old_dim; ++i) tt.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
  Eigen::Index at = old_dim;
  for (const auto& s : slices) {
    out.minus.push_back({static_cast<std::size_t>(at), s.size});
    for (std::size_t t = 0; t < s.size; ++t) {
      tt.emplace_back(static_cast<int>(s.offset + t), static_cast<int>(at + static_cast<Eigen::Index>(t)), -1.0);
    }
    at += static_cast<Eigen::Index>(s.size);
  }
  SparseMatrix T(old_dim, dim);
  T.setFromTriplets(tt.begin(), tt.end());
  const SparseMatrix Tt = T.transpose();

  auto& p = out.problem;
  SparseMatrix q = Tt * problem.Q * T;
  p.pi = Tt * problem.pi;
  p.A = problem.A * T;
  p.a = problem.a;
  p.pinned_duals = problem.pinned_duals;

  std::vector<Triplet> qt, bt;
  std::vector<double> rows;
  for (std::size_t si = 0; si < slices.size(); ++si) {
    for (std::size_t t = 0; t < slices[si].size; ++t) {
      const auto plus = static_cast<int>(slices[si].offset + t);
      const auto minus = static_cast<int>(out.minus[si].offset + t);
      const auto ti = static_cast<Eigen::Index>(t);
      p.pi[plus] += eps[ti];
      p.pi[minus] += eps[ti];
      const double u = 2.0 * ups[ti];
      if (u != 0.0) {
        qt.emplace_back(plus, plus, u);
        qt.emplace_back(minus, minus, u);
        qt.emplace_back(plus, minus, -u);
        qt.emplace_back(minus, plus, -u);
      }
      for (int leg : {plus, minus}) {
        bt.emplace_back(static_cast<int>(rows.size()), leg, 1.0);
        rows.push_back(bound);
        bt.emplace_back(static_cast<int>(rows.size()), leg, -1.0);
        rows.push_back(0.0);
      }
    }
  }
  SparseMatrix cost(dim, dim);
  cost.setFromTriplets(qt.begin(), qt.end());
  p.Q = q + cost;

  SparseMatrix extra_b(static_cast<Eigen::Index>(rows.size()), dim);
  extra_b.setFromTriplets(bt.begin(), bt.end());
  const SparseMatrix old_b = problem.B * T;
  p.B.resize(old_b.rows() + extra_b.rows(), dim);
  {
    std::vector<Triplet> all;
    all.reserve(static_cast<std::size_t>(old_b.nonZeros() + extra_b.nonZeros()));
    for (int c = 0; c < old_b.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(old_b, c); it; ++it)
        all.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    for (int c = 0; c < extra_b.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(extra_b, c); it; ++it)
        all.emplace_back(static_cast<int>(old_b.rows() + it.row()), static_cast<int>(it.col()), it.value());
    p.B.setFromTriplets(all.begin(), all.end());
  }
  p.b.resize(p.B.rows());
  p.b << problem.b, Eigen::Map<const Vector>(rows.data(), static_cast<Eigen::Index>(rows.size()));
  out.bound_rows = {static_cast<std::size_t>(problem.b.size()), rows.size()};
  p.check();
  return out;
}

AssembledQP apply_transaction_costs(const AssembledQP& qp, const MarketInstance& market) {
  if (!market.costs) throw ModelError("market has no trading cost specification");
  if (qp.layout.split_volumes) throw ModelError("volumes are already split");
  const auto n = static_cast<Eigen::Index>(market.grid.size());
  const auto& cs = *market.costs;
  if (cs.epsilon.size() != n || cs.upsilon.size() != n) {
    throw ModelError("trading cost spec must have one entry per contract");
  }
  const TradableMap map = market.tradable_map();
  const Vector eps = merge_to_tradables(cs.epsilon, map);
  const Vector ups = merge_to_tradables(cs.upsilon, map);

  std::vector<Slice> slices;
  for (const auto& s : qp.layout.producers) slices.push_back(s.v);
  for (const auto& s : qp.layout.consumers) slices.push_back(s.v);
  auto split = split_trading_volumes(qp.problem, slices, eps, ups, market.trade_bound);

  AssembledQP out = qp;
  out.problem = std::move(split.problem);
  out.layout.split_volumes = true;
  std::size_t k = 0;
  for (auto& s : out.layout.producers) s.v_minus = split.minus[k++];
  for (auto& s : out.layout.consumers) s.v_minus = split.minus[k++];
  out.layout.dim = static_cast<std::size_t>(out.problem.dim());
  const std::size_t per_player = 4 * map.count;
  out.player_split_rows.clear();
  for (std::size_t player = 0; player < slices.size(); ++player) {
    out.player_split_rows.push_back({split.bound_rows.offset + player * per_player, per_player});
    for (std::size_t r = 0; r < per_player; ++r) {
      out.ineq_tags.push_back({ConstraintFamily::split_bound, static_cast<int>(player)});
    }
  }
  return out;
}

}  // namespace fwdeq
