#include "fwdeq/assembly.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace fwdeq {

std::string to_string(ConstraintFamily family) {
  switch (family) {
    case ConstraintFamily::volume_balance: return "volume balance";
    case ConstraintFamily::fuel_cover: return "fuel cover";
    case ConstraintFamily::emissions: return "emissions";
    case ConstraintFamily::demand: return "demand";
    case ConstraintFamily::clearing: return "clearing";
    case ConstraintFamily::ramp: return "ramp";
    case ConstraintFamily::capacity: return "capacity";
    case ConstraintFamily::trade_bound: return "trade bound";
    case ConstraintFamily::split_bound: return "split bound";
  }
  return "unknown";
}

SparseMatrix PlayerBlocks::hessian() const {
  std::vector<Triplet> t;
  for (Eigen::Index c = 0; c < risk.cols(); ++c) {
    for (Eigen::Index r = 0; r < risk.rows(); ++r) {
      if (risk(r, c) != 0.0) t.emplace_back(static_cast<int>(r), static_cast<int>(c), risk(r, c));
    }
  }
  SparseMatrix h(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  h.setFromTriplets(t.begin(), t.end());
  return h;
}

namespace {

// Rows accumulated as triplets, turned into a sparse matrix at the end.
struct RowBuilder {
  std::vector<Triplet> entries;
  std::vector<double> rhs;
  std::vector<ConstraintFamily> family;

  int add_row(double value, ConstraintFamily f) {
    rhs.push_back(value);
    family.push_back(f);
    return static_cast<int>(rhs.size()) - 1;
  }
  void set(int row, std::size_t col, double v) {
    entries.emplace_back(row, static_cast<int>(col), v);
  }
  void finish(std::size_t cols, SparseMatrix& m, Vector& b,
              std::vector<ConstraintFamily>& fam) const {
    m.resize(static_cast<Eigen::Index>(rhs.size()), static_cast<Eigen::Index>(cols));
    m.setFromTriplets(entries.begin(), entries.end());
    b = Eigen::Map<const Vector>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
    fam = family;
  }
};

void add_trade_bounds(RowBuilder& rows, std::size_t count, double bound) {
  for (std::size_t t = 0; t < count; ++t) {
    rows.set(rows.add_row(bound, ConstraintFamily::trade_bound), t, 1.0);
    rows.set(rows.add_row(bound, ConstraintFamily::trade_bound), t, -1.0);
  }
}

// S^T Q1 S for a 0/1 substitution given as a contract -> tradable map.
Matrix merge_both(const Matrix& q1, const TradableMap& map) {
  Matrix half = Matrix::Zero(static_cast<Eigen::Index>(map.count), q1.cols());
  for (std::size_t k = 0; k < map.of_contract.size(); ++k) {
    half.row(static_cast<Eigen::Index>(map.of_contract[k])) += q1.row(static_cast<Eigen::Index>(k));
  }
  Matrix out = Matrix::Zero(half.rows(), half.rows());
  for (std::size_t k = 0; k < map.of_contract.size(); ++k) {
    out.col(static_cast<Eigen::Index>(map.of_contract[k])) += half.col(static_cast<Eigen::Index>(k));
  }
  return out;
}

Matrix merge_rows(const Matrix& q2, const TradableMap& map) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(map.count), q2.cols());
  for (std::size_t k = 0; k < map.of_contract.size(); ++k) {
    out.row(static_cast<Eigen::Index>(map.of_contract[k])) += q2.row(static_cast<Eigen::Index>(k));
  }
  return out;
}

}  // namespace

PlayerBlocks producer_blocks(const Producer& producer, const MarketInstance& market) {
  const auto& grid = market.grid;
  const std::size_t n = grid.size();
  const std::size_t nj = grid.deliveries();
  const std::size_t nl = market.fuels.size();
  const TradableMap map = market.tradable_map();
  const std::size_t nt = map.count;
  const auto order = plant_order(producer, market.fuels);
  const std::size_t nr = order.size();

  const std::size_t f0 = nt;
  const std::size_t o0 = f0 + n * nl;
  const std::size_t w0 = o0 + n;
  auto w_col = [&](std::size_t j, std::size_t pos) { return w0 + j * nr + pos; };

  std::vector<std::size_t> fuel_of(nr);
  for (std::size_t pos = 0; pos < nr; ++pos) {
    fuel_of[pos] = market.fuel_index(producer.plants[order[pos]].fuel);
  }

  PlayerBlocks out;
  out.dim = w0 + nr * nj;

  RowBuilder eq;
  for (std::size_t j = 0; j < nj; ++j) {
    const int row = eq.add_row(0.0, ConstraintFamily::volume_balance);
    for (std::size_t i = 0; i < grid.ladder_size(j); ++i) {
      eq.set(row, map.of_contract[grid.offset(j) + i], 1.0);
    }
    for (std::size_t pos = 0; pos < nr; ++pos) eq.set(row, w_col(j, pos), 1.0);
  }
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t j = 0; j < nj; ++j) {
      const int row = eq.add_row(0.0, ConstraintFamily::fuel_cover);
      for (std::size_t i = 0; i < grid.ladder_size(j); ++i) {
        eq.set(row, f0 + (grid.offset(j) + i) * nl + l, 1.0);
      }
      for (std::size_t pos = 0; pos < nr; ++pos) {
        if (fuel_of[pos] == l) {
          eq.set(row, w_col(j, pos), -producer.plants[order[pos]].efficiency);
        }
      }
    }
  }
  {
    const int row = eq.add_row(0.0, ConstraintFamily::emissions);
    for (std::size_t k = 0; k < n; ++k) eq.set(row, o0 + k, 1.0);
    for (std::size_t j = 0; j < nj; ++j) {
      for (std::size_t pos = 0; pos < nr; ++pos) {
        eq.set(row, w_col(j, pos), -producer.plants[order[pos]].emission_intensity);
      }
    }
  }
  eq.finish(out.dim, out.eq, out.eq_rhs, out.eq_family);

  RowBuilder in;
  for (std::size_t pos = 0; pos < nr; ++pos) {
    const auto& plant = producer.plants[order[pos]];
    for (std::size_t j = 0; j + 1 < nj; ++j) {
      int row = in.add_row(plant.ramp_up, ConstraintFamily::ramp);
      in.set(row, w_col(j + 1, pos), 1.0);
      in.set(row, w_col(j, pos), -1.0);
      row = in.add_row(-plant.ramp_down, ConstraintFamily::ramp);
      in.set(row, w_col(j + 1, pos), -1.0);
      in.set(row, w_col(j, pos), 1.0);
    }
  }
  for (std::size_t pos = 0; pos < nr; ++pos) {
    const auto& plant = producer.plants[order[pos]];
    for (std::size_t j = 0; j < nj; ++j) {
      in.set(in.add_row(plant.capacity_max, ConstraintFamily::capacity), w_col(j, pos), 1.0);
      in.set(in.add_row(0.0, ConstraintFamily::capacity), w_col(j, pos), -1.0);
    }
  }
  add_trade_bounds(in, nt, market.trade_bound);
  in.finish(out.dim, out.ineq, out.ineq_rhs, out.ineq_family);

  const Matrix q1 = market.covariance.q1();
  const Matrix q2 = market.covariance.q2();
  const auto rest = static_cast<Eigen::Index>(n * (nl + 1));
  const auto vt = static_cast<Eigen::Index>(nt);
  out.risk.resize(vt + rest, vt + rest);
  out.risk.topLeftCorner(vt, vt) = merge_both(q1, map);
  out.risk.topRightCorner(vt, rest) = merge_rows(q2, map);
  out.risk.bottomLeftCorner(rest, vt) = out.risk.topRightCorner(vt, rest).transpose();
  out.risk.bottomRightCorner(rest, rest) = market.covariance.q3();

  const Vector df = discount_factors(grid, market.curves.interest_rate);
  out.linear = Vector::Zero(static_cast<Eigen::Index>(out.dim));
  for (std::size_t k = 0; k < n; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    for (std::size_t l = 0; l < nl; ++l) {
      out.linear[static_cast<Eigen::Index>(f0 + k * nl + l)] =
          df[kk] * market.curves.fuel_prices(kk, static_cast<Eigen::Index>(l));
    }
    out.linear[static_cast<Eigen::Index>(o0 + k)] = df[kk] * market.curves.emission_prices[kk];
  }
  return out;
}

PlayerBlocks consumer_blocks(const Consumer& consumer, const MarketInstance& market) {
  const auto& grid = market.grid;
  const TradableMap map = market.tradable_map();
  PlayerBlocks out;
  out.dim = map.count;

  RowBuilder eq;
  for (std::size_t j = 0; j < grid.deliveries(); ++j) {
    const int row = eq.add_row(consumer.demand_share * market.curves.demand[static_cast<Eigen::Index>(j)],
                               ConstraintFamily::demand);
    for (std::size_t i = 0; i < grid.ladder_size(j); ++i) {
      eq.set(row, map.of_contract[grid.offset(j) + i], 1.0);
    }
  }
  eq.finish(out.dim, out.eq, out.eq_rhs, out.eq_family);

  RowBuilder in;
  add_trade_bounds(in, map.count, market.trade_bound);
  in.finish(out.dim, out.ineq, out.ineq_rhs, out.ineq_family);

  out.risk = merge_both(market.covariance.q1(), map);
  out.linear = Vector::Zero(static_cast<Eigen::Index>(out.dim));
  return out;
}

namespace {

void append_block(std::vector<Triplet>& t, const SparseMatrix& m, std::size_t row0,
                  std::size_t col0) {
  for (int c = 0; c < m.outerSize(); ++c) {
    for (SparseMatrix::InnerIterator it(m, c); it; ++it) {
      t.emplace_back(static_cast<int>(row0 + it.row()), static_cast<int>(col0 + it.col()),
                     it.value());
    }
  }
}

void append_dense(std::vector<Triplet>& t, const Matrix& m, double scale, std::size_t at) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      if (m(r, c) != 0.0) {
        t.emplace_back(static_cast<int>(at + r), static_cast<int>(at + c), scale * m(r, c));
      }
    }
  }
}

}  // namespace

AssembledQP assemble_global(const MarketInstance& market) {
  AssembledQP out;
  out.layout = make_layout(market);
  const auto& layout = out.layout;
  const std::size_t nt = market.tradable_count();
  const std::size_t np = market.producers.size();

  std::vector<PlayerBlocks> blocks;
  std::vector<std::size_t> starts;
  std::vector<double> lambdas;
  for (std::size_t p = 0; p < np; ++p) {
    blocks.push_back(producer_blocks(market.producers[p], market));
    starts.push_back(layout.producers[p].v.offset);
    lambdas.push_back(market.producers[p].risk_aversion);
    if (blocks.back().dim != layout.producers[p].dim()) {
      throw std::logic_error("producer block does not match its layout slice");
    }
  }
  for (std::size_t c = 0; c < market.consumers.size(); ++c) {
    blocks.push_back(consumer_blocks(market.consumers[c], market));
    starts.push_back(layout.consumers[c].v.offset);
    lambdas.push_back(market.consumers[c].risk_aversion);
    if (blocks.back().dim != layout.consumers[c].v.size) {
      throw std::logic_error("consumer block does not match its layout slice");
    }
  }

  std::vector<Triplet> qt, at, bt;
  std::vector<double> a, b;
  Vector pi = Vector::Zero(static_cast<Eigen::Index>(layout.dim));
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& blk = blocks[k];
    const int player = static_cast<int>(k);
    append_dense(qt, blk.risk, lambdas[k], starts[k]);
    for (std::size_t t = 0; t < nt; ++t) {
      const auto v = static_cast<int>(starts[k] + t);
      const auto price = static_cast<int>(layout.price.offset + t);
      qt.emplace_back(v, price, 1.0);
      qt.emplace_back(price, v, 1.0);
    }
    pi.segment(static_cast<Eigen::Index>(starts[k]), static_cast<Eigen::Index>(blk.dim)) =
        blk.linear;

    out.player_eq_rows.push_back({a.size(), static_cast<std::size_t>(blk.eq_rhs.size())});
    append_block(at, blk.eq, a.size(), starts[k]);
    for (Eigen::Index r = 0; r < blk.eq_rhs.size(); ++r) {
      a.push_back(blk.eq_rhs[r]);
      out.eq_tags.push_back({blk.eq_family[static_cast<std::size_t>(r)], player});
    }

    out.player_ineq_rows.push_back({b.size(), static_cast<std::size_t>(blk.ineq_rhs.size())});
    append_block(bt, blk.ineq, b.size(), starts[k]);
    for (Eigen::Index r = 0; r < blk.ineq_rhs.size(); ++r) {
      b.push_back(blk.ineq_rhs[r]);
      out.ineq_tags.push_back({blk.ineq_family[static_cast<std::size_t>(r)], player});
    }
  }

  out.clearing_rows = {a.size(), nt};
  for (std::size_t t = 0; t < nt; ++t) {
    const auto row = static_cast<int>(a.size());
    for (auto s : starts) at.emplace_back(row, static_cast<int>(s + t), 1.0);
    a.push_back(0.0);
    out.eq_tags.push_back({ConstraintFamily::clearing, -1});
    out.problem.pinned_duals.push_back(static_cast<std::size_t>(row));
  }

  const auto dim = static_cast<Eigen::Index>(layout.dim);
  auto& qp = out.problem;
  qp.Q.resize(dim, dim);
  qp.Q.setFromTriplets(qt.begin(), qt.end());
  qp.pi = std::move(pi);
  qp.A.resize(static_cast<Eigen::Index>(a.size()), dim);
  qp.A.setFromTriplets(at.begin(), at.end());
  qp.a = Eigen::Map<const Vector>(a.data(), static_cast<Eigen::Index>(a.size()));
  qp.B.resize(static_cast<Eigen::Index>(b.size()), dim);
  qp.B.setFromTriplets(bt.begin(), bt.end());
  qp.b = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
  qp.check();
  return out;
}

double min_clearing_curvature(const AssembledQP& qp, int samples, std::uint64_t seed) {
  const auto& p = qp.problem;
  const SparseMatrix c =
      p.A.middleRows(static_cast<Eigen::Index>(qp.clearing_rows.offset),
                     static_cast<Eigen::Index>(qp.clearing_rows.size));
  const Matrix cct = Matrix(c * SparseMatrix(c.transpose()));
  const Eigen::LLT<Matrix> llt(cct);

  double qnorm = 0.0;
  for (int k = 0; k < p.Q.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.Q, k); it; ++it) qnorm = std::max(qnorm, std::abs(it.value()));
  }
  if (qnorm == 0.0) return 0.0;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  double worst = std::numeric_limits<double>::infinity();
  Vector x(p.dim());
  for (int s = 0; s < samples; ++s) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = gauss(rng);
    if (c.rows() > 0) x -= c.transpose() * llt.solve(c * x);
    const double nn = x.squaredNorm();
    if (nn == 0.0) continue;
    worst = std::min(worst, x.dot(p.Q * x) / (nn * qnorm));
  }
  return worst;
}

}  // namespace fwdeq
