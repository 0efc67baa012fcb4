#include "fwdeq/model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fwdeq {

ContractGrid ContractGrid::build(std::vector<double> delivery_times,
                                 std::vector<std::vector<double>> trading_times) {
  if (delivery_times.empty()) throw ModelError("grid has no delivery times");
  if (delivery_times.size() != trading_times.size()) {
    throw ModelError("one trading ladder is required per delivery time");
  }
  for (std::size_t j = 0; j < delivery_times.size(); ++j) {
    if (!std::isfinite(delivery_times[j])) throw ModelError("non-finite delivery time");
    if (j > 0 && !(delivery_times[j] > delivery_times[j - 1])) {
      throw ModelError("delivery times must be strictly increasing");
    }
    const auto& ladder = trading_times[j];
    if (ladder.empty()) {
      throw ModelError("delivery " + std::to_string(j) + " has no trading times");
    }
    for (std::size_t i = 1; i < ladder.size(); ++i) {
      if (!(ladder[i] > ladder[i - 1])) {
        throw ModelError("trading times of delivery " + std::to_string(j) +
                         " must be strictly increasing");
      }
    }
    if (ladder.back() != delivery_times[j]) {
      throw ModelError("last trading time of delivery " + std::to_string(j) +
                       " must equal its delivery time");
    }
  }

  ContractGrid grid;
  grid.delivery_times_ = std::move(delivery_times);
  grid.trading_times_ = std::move(trading_times);
  grid.offsets_.assign(grid.delivery_times_.size() + 1, 0);
  for (std::size_t j = 0; j < grid.delivery_times_.size(); ++j) {
    grid.offsets_[j + 1] = grid.offsets_[j] + grid.trading_times_[j].size();
  }
  return grid;
}

std::size_t ContractGrid::flatten(std::size_t j, std::size_t i) const {
  if (j >= deliveries() || i >= trading_times_[j].size()) {
    throw std::out_of_range("contract (" + std::to_string(j) + ", " + std::to_string(i) +
                            ") is not on the grid");
  }
  return offsets_[j] + i;
}

ContractIndex ContractGrid::unflatten(std::size_t k) const {
  if (k >= size()) throw std::out_of_range("flat contract index out of range");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), k);
  const auto j = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  return {j, k - offsets_[j]};
}

double ContractGrid::trading_time(std::size_t k) const {
  const auto idx = unflatten(k);
  return trading_times_[idx.delivery][idx.trading];
}

Vector discount_factors(const ContractGrid& grid, double rate) {
  Vector df(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t j = 0; j < grid.deliveries(); ++j) {
    const double f = std::exp(-rate * grid.delivery_time(j));
    for (std::size_t i = 0; i < grid.ladder_size(j); ++i) {
      df[static_cast<Eigen::Index>(grid.offset(j) + i)] = f;
    }
  }
  return df;
}

CovarianceModel::CovarianceModel(Matrix stacked, std::size_t contracts)
    : stacked_(std::move(stacked)), contracts_(contracts) {
  if (stacked_.rows() != stacked_.cols()) throw ModelError("covariance must be square");
  if (static_cast<std::size_t>(stacked_.rows()) < contracts_) {
    throw ModelError("covariance smaller than the contract count");
  }
}

TradableMap TradableMap::identity(std::size_t n) {
  TradableMap map;
  map.of_contract.resize(n);
  for (std::size_t k = 0; k < n; ++k) map.of_contract[k] = k;
  map.count = n;
  return map;
}

bool TradableMap::is_identity() const {
  if (count != of_contract.size()) return false;
  for (std::size_t k = 0; k < of_contract.size(); ++k) {
    if (of_contract[k] != k) return false;
  }
  return true;
}

SparseMatrix TradableMap::substitution() const {
  std::vector<Triplet> t;
  t.reserve(of_contract.size());
  for (std::size_t k = 0; k < of_contract.size(); ++k) {
    t.emplace_back(static_cast<int>(k), static_cast<int>(of_contract[k]), 1.0);
  }
  SparseMatrix s(static_cast<Eigen::Index>(of_contract.size()),
                 static_cast<Eigen::Index>(count));
  s.setFromTriplets(t.begin(), t.end());
  return s;
}

std::size_t MarketInstance::fuel_index(const std::string& fuel) const {
  const auto it = std::find(fuels.begin(), fuels.end(), fuel);
  if (it == fuels.end()) throw ModelError("unknown fuel '" + fuel + "'");
  return static_cast<std::size_t>(it - fuels.begin());
}

std::vector<std::size_t> plant_order(const Producer& producer,
                                     const std::vector<std::string>& fuels) {
  std::vector<std::size_t> order;
  order.reserve(producer.plants.size());
  for (const auto& fuel : fuels) {
    for (std::size_t r = 0; r < producer.plants.size(); ++r) {
      if (producer.plants[r].fuel == fuel) order.push_back(r);
    }
  }
  if (order.size() != producer.plants.size()) {
    for (const auto& plant : producer.plants) {
      if (std::find(fuels.begin(), fuels.end(), plant.fuel) == fuels.end()) {
        throw ModelError("producer " + producer.id + ": plant " + plant.id +
                         " uses unknown fuel '" + plant.fuel + "'");
      }
    }
  }
  return order;
}

VariableLayout make_layout(const MarketInstance& market, bool split_volumes) {
  const std::size_t n = market.grid.size();
  const std::size_t nt = market.tradable_count();
  const std::size_t nl = market.fuels.size();
  const std::size_t nj = market.grid.deliveries();

  VariableLayout layout;
  layout.split_volumes = split_volumes;
  std::size_t at = 0;
  auto take = [&at](std::size_t size) {
    Slice s{at, size};
    at += size;
    return s;
  };
  for (const auto& p : market.producers) {
    VariableLayout::ProducerSlices s;
    s.v = take(nt);
    s.f = take(n * nl);
    s.o = take(n);
    s.w = take(p.plants.size() * nj);
    layout.producers.push_back(s);
  }
  for (std::size_t c = 0; c < market.consumers.size(); ++c) {
    layout.consumers.push_back({take(nt), {}});
  }
  layout.price = take(nt);
  if (split_volumes) {
    for (auto& s : layout.producers) s.v_minus = take(nt);
    for (auto& s : layout.consumers) s.v_minus = take(nt);
  }
  layout.dim = at;
  return layout;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::string> validate_market(const MarketInstance& market) {
  std::vector<std::string> issues;
  const std::size_t n = market.grid.size();
  const std::size_t nl = market.fuels.size();

  if (n == 0) issues.emplace_back("contract grid is empty");
  if (market.producers.empty()) issues.emplace_back("market has no producers");
  if (market.consumers.empty()) issues.emplace_back("market has no consumers");
  if (!(market.trade_bound > 0.0)) issues.emplace_back("trade bound must be positive");

  for (const auto& p : market.producers) {
    if (!(p.risk_aversion > 0.0)) {
      issues.push_back("producer " + p.id + ": risk aversion must be positive");
    }
    for (const auto& plant : p.plants) {
      const std::string who = "producer " + p.id + " plant " + plant.id;
      if (std::find(market.fuels.begin(), market.fuels.end(), plant.fuel) ==
          market.fuels.end()) {
        issues.push_back(who + ": unknown fuel '" + plant.fuel + "'");
      }
      if (!(plant.capacity_max >= 0.0)) issues.push_back(who + ": negative capacity");
      if (!(plant.efficiency > 0.0)) issues.push_back(who + ": efficiency must be positive");
      if (!(plant.emission_intensity > 0.0)) {
        issues.push_back(who + ": emission intensity must be positive");
      }
      if (!(plant.ramp_down <= 0.0 && plant.ramp_up >= 0.0)) {
        issues.push_back(who + ": ramp bounds must satisfy ramp_down <= 0 <= ramp_up");
      }
    }
  }

  double share = 0.0;
  for (const auto& c : market.consumers) {
    if (!(c.risk_aversion > 0.0)) {
      issues.push_back("consumer " + c.id + ": risk aversion must be positive");
    }
    if (!(c.demand_share >= 0.0 && c.demand_share <= 1.0)) {
      issues.push_back("consumer " + c.id + ": demand share outside [0, 1]");
    }
    share += c.demand_share;
  }
  if (!market.consumers.empty() && std::abs(share - 1.0) > 1e-12) {
    issues.push_back("demand shares sum to " + fmt(share));
  }

  const auto& cv = market.curves;
  if (static_cast<std::size_t>(cv.fuel_prices.rows()) != n ||
      static_cast<std::size_t>(cv.fuel_prices.cols()) != nl) {
    issues.emplace_back("fuel price curves must be N x |L|");
  } else if (!cv.fuel_prices.allFinite()) {
    issues.emplace_back("fuel price curves contain non-finite values");
  }
  if (static_cast<std::size_t>(cv.emission_prices.size()) != n) {
    issues.emplace_back("emission price curve must have one value per contract");
  } else if (!cv.emission_prices.allFinite()) {
    issues.emplace_back("emission price curve contains non-finite values");
  }
  if (static_cast<std::size_t>(cv.demand.size()) != market.grid.deliveries()) {
    issues.emplace_back("demand must have one value per delivery");
  } else {
    for (Eigen::Index j = 0; j < cv.demand.size(); ++j) {
      if (!std::isfinite(cv.demand[j]) || cv.demand[j] < 0.0) {
        issues.push_back("demand of delivery " + std::to_string(j) +
                         " must be finite and non-negative");
      }
    }
  }

  if (market.costs) {
    const auto& cs = *market.costs;
    if (static_cast<std::size_t>(cs.epsilon.size()) != n ||
        static_cast<std::size_t>(cs.upsilon.size()) != n) {
      issues.emplace_back("trading cost spec must have one entry per contract");
    } else if ((cs.epsilon.array() < 0.0).any() || (cs.upsilon.array() < 0.0).any()) {
      issues.emplace_back("trading costs must be non-negative");
    }
  }

  if (!market.tradable.of_contract.empty()) {
    if (market.tradable.of_contract.size() != n) {
      issues.emplace_back("tradable map must cover every grid contract");
    } else {
      for (auto t : market.tradable.of_contract) {
        if (t >= market.tradable.count) {
          issues.emplace_back("tradable map index out of range");
          break;
        }
      }
    }
  }

  const Matrix& q = market.covariance.stacked();
  const auto dim = static_cast<Eigen::Index>(n * (nl + 2));
  if (q.rows() != dim || q.cols() != dim || market.covariance.contracts() != n) {
    issues.push_back("covariance must be " + std::to_string(dim) + " x " +
                     std::to_string(dim));
  } else if (!q.allFinite()) {
    issues.emplace_back("covariance contains non-finite values");
  } else {
    const double asym = (q - q.transpose()).cwiseAbs().maxCoeff();
    const double norm = q.cwiseAbs().maxCoeff();
    if (asym > 1e-12 * (1.0 + norm)) issues.emplace_back("covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (q + q.transpose()),
                                              Eigen::EigenvaluesOnly);
    const double floor = -1e-10 * eig.eigenvalues().cwiseAbs().maxCoeff();
    if (eig.eigenvalues().minCoeff() < floor) {
      issues.push_back("covariance is not positive semidefinite (min eigenvalue " +
                       fmt(eig.eigenvalues().minCoeff()) + ")");
    }
    Eigen::LLT<Matrix> llt(market.covariance.q1());
    if (llt.info() != Eigen::Success) {
      issues.emplace_back("electricity covariance block is not positive definite");
    }
  }
  return issues;
}

}  // namespace fwdeq
