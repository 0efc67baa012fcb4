#include "fwdeq/equilibrium.hpp"

#include "fwdeq/extensions.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <type_traits>

namespace fwdeq {

namespace {

std::string describe(const std::string& player, ConstraintFamily family, double margin) {
  std::ostringstream os;
  os << "no strictly feasible point for " << player << " (" << to_string(family)
     << " constraints, violation margin " << margin << ")";
  return os.str();
}

bool is_producer(const MarketInstance& m, std::size_t player) {
  return player < m.producers.size();
}

PlayerBlocks blocks_of(const MarketInstance& m, std::size_t player) {
  if (is_producer(m, player)) return producer_blocks(m.producers[player], m);
  return consumer_blocks(m.consumers[player - m.producers.size()], m);
}

double lambda_of(const MarketInstance& m, std::size_t player) {
  if (is_producer(m, player)) return m.producers[player].risk_aversion;
  return m.consumers[player - m.producers.size()].risk_aversion;
}

double max_abs(const SparseMatrix& m) {
  double out = 0.0;
  for (int k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) out = std::max(out, std::abs(it.value()));
  return out;
}

// Row of B x - b with the largest value; its family names the failure.
template <class Tag>
ConstraintFamily worst_family(const SparseMatrix& B, const Vector& b, const Vector& x,
                              const std::vector<Tag>& families, ConstraintFamily fallback) {
  if (B.rows() == 0) return fallback;
  Eigen::Index row = 0;
  (B * x - b).maxCoeff(&row);
  const auto& tag = families[static_cast<std::size_t>(row)];
  if constexpr (std::is_same_v<Tag, RowTag>) {
    return tag.family;
  } else {
    return tag;
  }
}

struct CostVectors {
  Vector eps;
  Vector ups;
};

std::optional<CostVectors> tradable_costs(const MarketInstance& m) {
  if (!m.costs) return std::nullopt;
  const TradableMap map = m.tradable_map();
  return CostVectors{merge_to_tradables(m.costs->epsilon, map),
                     merge_to_tradables(m.costs->upsilon, map)};
}

}  // namespace

InfeasibleMarket::InfeasibleMarket(std::string player, ConstraintFamily family, double margin)
    : std::runtime_error(describe(player, family, margin)),
      player_(std::move(player)),
      family_(family),
      margin_(margin) {}

std::size_t player_count(const MarketInstance& market) {
  return market.producers.size() + market.consumers.size();
}

std::string player_id(const MarketInstance& market, std::size_t player) {
  if (is_producer(market, player)) return "producer " + market.producers[player].id;
  return "consumer " + market.consumers.at(player - market.producers.size()).id;
}

PlayerProblem player_problem(const MarketInstance& market, std::size_t player,
                             const Vector& tradable_prices) {
  const auto blk = blocks_of(market, player);
  const auto nt = static_cast<Eigen::Index>(market.tradable_count());
  if (tradable_prices.size() != nt) throw ModelError("price vector does not match the tradables");

  PlayerProblem out;
  out.risk_aversion = lambda_of(market, player);
  auto& p = out.problem;
  p.Q = out.risk_aversion * blk.hessian();
  p.pi = blk.linear;
  p.pi.head(nt) += tradable_prices;
  p.A = blk.eq;
  p.a = blk.eq_rhs;
  p.B = blk.ineq;
  p.b = blk.ineq_rhs;
  out.v = {0, static_cast<std::size_t>(nt)};
  if (const auto costs = tradable_costs(market)) {
    auto split = split_trading_volumes(p, {out.v}, costs->eps, costs->ups, market.trade_bound);
    p = std::move(split.problem);
    out.v_minus = split.minus.front();
  }
  return out;
}

double player_utility(const MarketInstance& market, std::size_t player, const Vector& v,
                      const Vector& tradable_prices) {
  const auto blk = blocks_of(market, player);
  const auto nt = static_cast<Eigen::Index>(market.tradable_count());
  if (static_cast<std::size_t>(v.size()) != blk.dim) throw ModelError("position has the wrong size");
  Vector pi = blk.linear;
  pi.head(nt) += tradable_prices;
  const auto r = blk.risk.rows();
  const Vector head = v.head(r);
  double u = -pi.dot(v) - 0.5 * lambda_of(market, player) * head.dot(blk.risk * head);
  if (const auto costs = tradable_costs(market)) {
    const Vector vol = v.head(nt);
    u -= costs->eps.dot(vol.cwiseAbs()) + costs->ups.dot(vol.cwiseAbs2());
  }
  return u;
}

namespace {

PlayerPosition position_from(const MarketInstance& market, std::size_t player,
                             const PlayerProblem& pp, const Vector& x) {
  PlayerPosition pos;
  pos.id = is_producer(market, player) ? market.producers[player].id
                                       : market.consumers[player - market.producers.size()].id;
  pos.producer = is_producer(market, player);
  const auto own = static_cast<Eigen::Index>(x.size() - static_cast<Eigen::Index>(pp.v_minus.size));
  pos.v = x.head(own);
  if (pp.v_minus.size > 0) {
    const auto nt = static_cast<Eigen::Index>(pp.v.size);
    pos.buy = x.segment(static_cast<Eigen::Index>(pp.v.offset), nt);
    pos.sell = x.segment(static_cast<Eigen::Index>(pp.v_minus.offset), nt);
    pos.v.segment(static_cast<Eigen::Index>(pp.v.offset), nt) = pos.buy - pos.sell;
  }
  return pos;
}

// The player's own variables gathered from the stacked vector, in
// player_problem order.
Vector gather_player(const AssembledQP& qp, std::size_t player, std::size_t producers,
                     const Vector& x) {
  const auto& layout = qp.layout;
  Slice own, minus;
  if (player < producers) {
    const auto& s = layout.producers[player];
    own = {s.v.offset, s.dim()};
    minus = s.v_minus;
  } else {
    const auto& s = layout.consumers[player - producers];
    own = s.v;
    minus = s.v_minus;
  }
  Vector out(static_cast<Eigen::Index>(own.size + minus.size));
  out << x.segment(static_cast<Eigen::Index>(own.offset), static_cast<Eigen::Index>(own.size)),
      x.segment(static_cast<Eigen::Index>(minus.offset), static_cast<Eigen::Index>(minus.size));
  return out;
}

Vector gather_rows(const Vector& v, std::initializer_list<Slice> slices) {
  std::size_t total = 0;
  for (const auto& s : slices) total += s.size;
  Vector out(static_cast<Eigen::Index>(total));
  Eigen::Index at = 0;
  for (const auto& s : slices) {
    out.segment(at, static_cast<Eigen::Index>(s.size)) =
        v.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.size));
    at += static_cast<Eigen::Index>(s.size);
  }
  return out;
}

void require_strict(const std::string& who, const QpProblem& p,
                    const std::vector<ConstraintFamily>& eq_families,
                    const std::vector<ConstraintFamily>& ineq_families) {
  Phase1Result r;
  try {
    r = phase1_feasible(p.A, p.a, p.B, p.b);
  } catch (const InconsistentEqualities&) {
    throw InfeasibleMarket(who, eq_families.empty() ? ConstraintFamily::demand : eq_families.front(),
                           std::numeric_limits<double>::infinity());
  }
  if (!r.strictly_feasible()) {
    throw InfeasibleMarket(who, worst_family(p.B, p.b, r.point, ineq_families,
                                             ConstraintFamily::trade_bound),
                           r.margin);
  }
}

std::vector<ConstraintFamily> with_split_rows(std::vector<ConstraintFamily> f, std::size_t extra) {
  f.insert(f.end(), extra, ConstraintFamily::split_bound);
  return f;
}

// Sensitivity of each player's net volumes to the discounted prices with the
// active set frozen; a (near) singular aggregate means some price direction
// moves no player, so the equilibrium price may be an interval.
bool prices_possibly_nonunique(const MarketInstance& market, const EquilibriumSolution& sol) {
  const auto nt = static_cast<Eigen::Index>(market.tradable_count());
  Matrix response = Matrix::Zero(nt, nt);
  double qscale = 1.0;
  for (std::size_t k = 0; k < sol.players(); ++k) {
    const auto pp = player_problem(market, k, sol.tradable_prices);
    const auto& p = pp.problem;
    const Vector x = gather_player(sol.qp, k, market.producers.size(), sol.raw.x);
    const Vector eta = gather_rows(sol.raw.ineq_duals,
                                   {sol.qp.player_ineq_rows[k],
                                    sol.qp.player_split_rows.empty() ? Slice{} : sol.qp.player_split_rows[k]});
    const Vector slack = p.b - p.B * x;
    qscale = std::max(qscale, max_abs(p.Q));

    std::vector<Triplet> t;
    const auto n = p.dim();
    const double delta = 1e-12;
    for (int c = 0; c < p.Q.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(p.Q, c); it; ++it)
        t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    Eigen::Index rows = n;
    auto add_rows = [&](const SparseMatrix& m, auto&& keep) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (!keep(r)) continue;
        const SparseMatrix row = m.row(r);
        for (int c = 0; c < row.outerSize(); ++c)
          for (SparseMatrix::InnerIterator it(row, c); it; ++it) {
            t.emplace_back(static_cast<int>(rows), static_cast<int>(it.col()), it.value());
            t.emplace_back(static_cast<int>(it.col()), static_cast<int>(rows), it.value());
          }
        ++rows;
      }
    };
    const SparseMatrix At = p.A;
    add_rows(At, [](Eigen::Index) { return true; });
    const SparseMatrix Br = p.B;
    add_rows(Br, [&](Eigen::Index r) { return eta[r] > slack[r]; });
    for (Eigen::Index i = 0; i < rows; ++i) {
      t.emplace_back(static_cast<int>(i), static_cast<int>(i), i < n ? delta : -delta);
    }
    SparseMatrix K(rows, rows);
    K.setFromTriplets(t.begin(), t.end());
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(K);
    if (ldlt.info() != Eigen::Success) return true;

    Matrix rhs = Matrix::Zero(rows, nt);
    for (Eigen::Index j = 0; j < nt; ++j) {
      rhs(static_cast<Eigen::Index>(pp.v.offset) + j, j) = 1.0;
      if (pp.v_minus.size > 0) rhs(static_cast<Eigen::Index>(pp.v_minus.offset) + j, j) = -1.0;
    }
    const Matrix dx = ldlt.solve(rhs);
    Matrix dv = dx.middleRows(static_cast<Eigen::Index>(pp.v.offset), nt);
    if (pp.v_minus.size > 0) dv -= dx.middleRows(static_cast<Eigen::Index>(pp.v_minus.offset), nt);
    response += dv;
  }
  const Matrix sym = 0.5 * (response + response.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() <= 1e-8 / qscale;
}

}  // namespace

EquilibriumSolution solve_equilibrium(const MarketInstance& market,
                                      const EquilibriumOptions& options) {
  const auto issues = validate_market(market);
  if (!issues.empty()) {
    std::string msg = "invalid market:";
    for (const auto& s : issues) msg += "\n  " + s;
    throw ModelError(msg);
  }

  EquilibriumSolution sol;
  sol.qp = assemble_global(market);
  if (market.costs) sol.qp = apply_transaction_costs(sol.qp, market);
  const auto& qp = sol.qp;
  const std::size_t np = market.producers.size();
  const std::size_t players = player_count(market);
  const auto nt = static_cast<Eigen::Index>(market.tradable_count());

  if (options.check_feasibility) {
    const Vector zero = Vector::Zero(nt);
    for (std::size_t k = 0; k < players; ++k) {
      const auto blk = blocks_of(market, k);
      const auto pp = player_problem(market, k, zero);
      require_strict(player_id(market, k), pp.problem, blk.eq_family,
                     with_split_rows(blk.ineq_family,
                                     static_cast<std::size_t>(pp.problem.B.rows() - blk.ineq.rows())));
    }
    std::vector<ConstraintFamily> eqf, inf;
    for (const auto& t : qp.eq_tags) eqf.push_back(t.family);
    for (const auto& t : qp.ineq_tags) inf.push_back(t.family);
    require_strict("the joint market", qp.problem, eqf, inf);
  }

  sol.raw = solve_dual_form(qp.problem, options.qp);
  if (sol.raw.status == QpStatus::infeasible) {
    throw InfeasibleMarket("the joint market",
                           worst_family(qp.problem.B, qp.problem.b, sol.raw.x, qp.ineq_tags,
                                        ConstraintFamily::clearing),
                           sol.raw.kkt.primal_ineq);
  }
  if (sol.raw.status != QpStatus::optimal) {
    throw SolverFailure("equilibrium solve stopped: " + to_string(sol.raw.status), sol.raw.status,
                        sol.raw.kkt);
  }

  const Vector& x = sol.raw.x;
  sol.tradable_prices = x.segment(static_cast<Eigen::Index>(qp.layout.price.offset), nt);
  const TradableMap map = market.tradable_map();
  const Vector df = discount_factors(market.grid, market.curves.interest_rate);
  sol.prices.resize(static_cast<Eigen::Index>(market.grid.size()));
  for (std::size_t k = 0; k < market.grid.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    sol.prices[kk] = sol.tradable_prices[static_cast<Eigen::Index>(map.of_contract[k])] / df[kk];
  }

  const double demand = market.curves.demand.sum();
  Vector net = Vector::Zero(nt);
  for (std::size_t k = 0; k < players; ++k) {
    const auto pp = player_problem(market, k, sol.tradable_prices);
    auto pos = position_from(market, k, pp, gather_player(qp, k, np, x));
    net += pos.v.head(nt);
    const double u = player_utility(market, k, pos.v, sol.tradable_prices);
    sol.utilities.push_back(u);
    if (k >= np) {
      const auto& c = market.consumers[k - np];
      sol.retail_utilities.push_back(u + c.retail_price * c.demand_share * demand);
    } else {
      sol.retail_utilities.push_back(u);
    }
    sol.positions.push_back(std::move(pos));
  }
  sol.clearing_residual = net.cwiseAbs().maxCoeff();
  if (options.check_uniqueness) sol.possibly_nonunique = prices_possibly_nonunique(market, sol);
  return sol;
}

BestResponse best_response(const MarketInstance& market, std::size_t player,
                           const Vector& tradable_prices, const QpOptions& options) {
  const auto pp = player_problem(market, player, tradable_prices);
  BestResponse out;
  out.raw = solve_dual_form(pp.problem, options);
  if (out.raw.status == QpStatus::infeasible) {
    const auto blk = blocks_of(market, player);
    const auto fam = with_split_rows(blk.ineq_family,
                                     static_cast<std::size_t>(pp.problem.B.rows() - blk.ineq.rows()));
    throw InfeasibleMarket(player_id(market, player),
                           worst_family(pp.problem.B, pp.problem.b, out.raw.x, fam,
                                        ConstraintFamily::trade_bound),
                           out.raw.kkt.primal_ineq);
  }
  if (out.raw.status != QpStatus::optimal) {
    throw SolverFailure("best response of " + player_id(market, player) + " stopped: " +
                            to_string(out.raw.status),
                        out.raw.status, out.raw.kkt);
  }
  out.position = position_from(market, player, pp, out.raw.x);
  out.utility = player_utility(market, player, out.position.v, tradable_prices);
  return out;
}

KktReport player_kkt(const MarketInstance& market, const EquilibriumSolution& solution,
                     std::size_t player) {
  const auto pp = player_problem(market, player, solution.tradable_prices);
  const auto& qp = solution.qp;
  const Vector x = gather_player(qp, player, market.producers.size(), solution.raw.x);
  const Vector mu = gather_rows(solution.raw.eq_duals, {qp.player_eq_rows[player]});
  const Vector eta = gather_rows(
      solution.raw.ineq_duals,
      {qp.player_ineq_rows[player],
       qp.player_split_rows.empty() ? Slice{} : qp.player_split_rows[player]});
  return kkt_residuals(pp.problem, x, mu, eta);
}

NashReport verify_nash(const MarketInstance& market, const EquilibriumSolution& solution,
                       double tol) {
  NashReport rep;
  bool ok = true;
  for (std::size_t k = 0; k < solution.players(); ++k) {
    const auto br = best_response(market, k, solution.tradable_prices);
    const double eq = solution.utilities[k];
    const double gap = br.utility - eq;
    const double rel = gap / (1.0 + std::abs(eq));
    rep.gaps.push_back(gap);
    rep.relative_gaps.push_back(rel);
    rep.max_gap = std::max(rep.max_gap, std::abs(rel));
    ok = ok && std::abs(rel) <= tol;
  }
  rep.clearing_residual = solution.clearing_residual;
  rep.pinned = solution.raw.kkt.pinned;
  ok = ok && rep.clearing_residual <= 1e-8 * (1.0 + market.curves.demand.sum());
  ok = ok && rep.pinned == 0.0;
  rep.pass = ok;
  return rep;
}

}  // namespace fwdeq
