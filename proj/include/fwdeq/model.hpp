#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fwdeq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Raised when market data violates a structural invariant.
class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ContractIndex {
  std::size_t delivery = 0;
  std::size_t trading = 0;

  friend bool operator==(const ContractIndex&, const ContractIndex&) = default;
};

/// Delivery times T_j and, per delivery, the trading times at which a forward
/// for that delivery can be bought. The last trading time of every ladder is
/// the delivery time itself (the spot contract).
///
/// Contracts are flattened delivery-major, trading-minor.
class ContractGrid {
 public:
  ContractGrid() = default;

  /// Throws ModelError on empty ladders, unsorted times or a ladder whose
  /// last trading time differs from its delivery time.
  static ContractGrid build(std::vector<double> delivery_times,
                            std::vector<std::vector<double>> trading_times);

  std::size_t size() const { return offsets_.empty() ? 0 : offsets_.back(); }
  std::size_t deliveries() const { return delivery_times_.size(); }
  std::size_t ladder_size(std::size_t j) const { return trading_times_.at(j).size(); }
  std::size_t offset(std::size_t j) const { return offsets_.at(j); }

  double delivery_time(std::size_t j) const { return delivery_times_.at(j); }
  std::span<const double> delivery_times() const { return delivery_times_; }
  std::span<const double> trading_times(std::size_t j) const { return trading_times_.at(j); }

  std::size_t flatten(std::size_t j, std::size_t i) const;
  ContractIndex unflatten(std::size_t k) const;

  double trading_time(std::size_t k) const;
  double delivery_time_of(std::size_t k) const { return delivery_times_[unflatten(k).delivery]; }

 private:
  std::vector<double> delivery_times_;
  std::vector<std::vector<double>> trading_times_;
  std::vector<std::size_t> offsets_;  // size deliveries()+1
};

/// e^{-rate * T_j} for every contract, in flat order.
Vector discount_factors(const ContractGrid& grid, double rate);

struct PowerPlant {
  std::string id;
  std::string fuel;
  double capacity_max = 0.0;        // MWh per delivery period
  double ramp_up = 0.0;             // max increase between consecutive deliveries
  double ramp_down = 0.0;           // max decrease, stored as a non-positive bound
  double efficiency = 1.0;          // fuel units per MWh
  double emission_intensity = 0.0;  // tonnes CO2 per MWh
};

struct Producer {
  std::string id;
  double risk_aversion = 1e-6;
  std::vector<PowerPlant> plants;  // empty for a pure trader
};

struct Consumer {
  std::string id;
  double risk_aversion = 1e-6;
  double demand_share = 1.0;
  double retail_price = 0.0;  // only used for reported retail profit
};

/// Expected exogenous curves on the contract grid.
struct ExogenousCurves {
  Matrix fuel_prices;      // N x |L|, currency per fuel unit
  Vector emission_prices;  // N, currency per tonne
  Vector demand;           // |J|, MWh per delivery (net of renewables/imports)
  double interest_rate = 0.0;
};

/// Covariance of the discounted price vector [Pi (N) | G (N*|L|, contract-major,
/// fuel-minor) | G_em (N)].
class CovarianceModel {
 public:
  CovarianceModel() = default;
  CovarianceModel(Matrix stacked, std::size_t contracts);

  const Matrix& stacked() const { return stacked_; }
  std::size_t contracts() const { return contracts_; }

  Matrix q1() const { return stacked_.topLeftCorner(contracts_, contracts_); }
  Matrix q2() const {
    return stacked_.topRightCorner(contracts_, stacked_.cols() - contracts_);
  }
  Matrix q3() const {
    const auto rest = stacked_.rows() - static_cast<Eigen::Index>(contracts_);
    return stacked_.bottomRightCorner(rest, rest);
  }

 private:
  Matrix stacked_;
  std::size_t contracts_ = 0;
};

/// Linear and quadratic trading cost per grid contract.
struct TransactionCostSpec {
  Vector epsilon;  // currency per contract
  Vector upsilon;  // currency per contract^2
};

/// Mapping of grid contracts onto tradable electricity contracts. Without
/// block contracts it is the identity; a block contract maps every covered
/// (trading time, delivery) pair onto one tradable index.
struct TradableMap {
  std::vector<std::size_t> of_contract;  // grid contract -> tradable index
  std::size_t count = 0;

  static TradableMap identity(std::size_t n);
  bool is_identity() const;
  /// N x count 0/1 substitution matrix.
  SparseMatrix substitution() const;
};

struct MarketInstance {
  ContractGrid grid;
  std::vector<std::string> fuels;
  std::vector<Producer> producers;
  std::vector<Consumer> consumers;
  ExogenousCurves curves;
  CovarianceModel covariance;
  double trade_bound = 1e5;
  std::optional<TransactionCostSpec> costs;
  TradableMap tradable;  // empty means identity

  std::size_t fuel_index(const std::string& fuel) const;
  std::size_t tradable_count() const {
    return tradable.of_contract.empty() ? grid.size() : tradable.count;
  }
  TradableMap tradable_map() const {
    return tradable.of_contract.empty() ? TradableMap::identity(grid.size()) : tradable;
  }
};

/// Plant positions of producer p ordered by fuel (market fuel order), then by
/// input order; this is the R^{p,l} ordering used for the W block.
std::vector<std::size_t> plant_order(const Producer& producer,
                                     const std::vector<std::string>& fuels);

struct Slice {
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t end() const { return offset + size; }
};

/// Location of every player's variables inside the stacked vector x.
/// Producers first, then consumers, then the price slice. When trading costs
/// are present the V slice holds buy volumes and `v_minus` (placed after the
/// price slice) holds sell volumes.
struct VariableLayout {
  struct ProducerSlices {
    Slice v, f, o, w, v_minus;
    std::size_t dim() const { return v.size + f.size + o.size + w.size; }
  };
  struct ConsumerSlices {
    Slice v, v_minus;
  };

  std::vector<ProducerSlices> producers;
  std::vector<ConsumerSlices> consumers;
  Slice price;
  std::size_t dim = 0;
  bool split_volumes = false;
};

VariableLayout make_layout(const MarketInstance& market, bool split_volumes = false);

/// All invariant violations of the market, empty iff valid.
std::vector<std::string> validate_market(const MarketInstance& market);

}  // namespace fwdeq
