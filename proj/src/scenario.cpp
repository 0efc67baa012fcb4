#include "fwdeq/scenario.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

namespace fwdeq {

using Json = nlohmann::ordered_json;

namespace {

std::size_t asset_count(std::size_t fuels) { return fuels + 2; }

// position of asset a, contract k in the stacked vector
Eigen::Index stacked_index(std::size_t a, std::size_t k, std::size_t n, std::size_t fuels) {
  if (a == 0) return static_cast<Eigen::Index>(k);
  if (a == fuels + 1) return static_cast<Eigen::Index>(n * (fuels + 1) + k);
  return static_cast<Eigen::Index>(n + k * fuels + (a - 1));
}

}  // namespace

CovarianceModel synthetic_covariance(const ContractGrid& grid, std::size_t fuels,
                                     const SyntheticCovariance& spec) {
  const std::size_t assets = asset_count(fuels);
  auto check = [&](const std::vector<double>& v, const std::string& what) {
    if (v.size() != assets) {
      throw ModelError(what + " needs " + std::to_string(assets) + " entries, got " +
                       std::to_string(v.size()));
    }
  };
  check(spec.noise, "covariance noise");
  check(spec.noise_decay, "covariance noise_decay");
  for (const auto& f : spec.factors) {
    check(f.level, "factor '" + f.name + "' level");
    check(f.decay, "factor '" + f.name + "' decay");
  }
  if (!(spec.floor >= 0.0)) throw ModelError("covariance floor must be non-negative");

  const std::size_t n = grid.size();
  const auto dim = static_cast<Eigen::Index>(n * assets);
  const auto nf = static_cast<Eigen::Index>(spec.factors.size());
  Matrix loadings = Matrix::Zero(dim, nf);
  Vector noise = Vector::Zero(dim);
  for (std::size_t k = 0; k < n; ++k) {
    const double lead = grid.delivery_time_of(k) - grid.trading_time(k);
    for (std::size_t a = 0; a < assets; ++a) {
      const auto row = stacked_index(a, k, n, fuels);
      for (Eigen::Index f = 0; f < nf; ++f) {
        const auto& factor = spec.factors[static_cast<std::size_t>(f)];
        loadings(row, f) = factor.level[a] * std::exp(-factor.decay[a] * lead);
      }
      noise[row] = spec.noise[a] * std::exp(-spec.noise_decay[a] * lead);
    }
  }
  Matrix cov = loadings * loadings.transpose();
  cov.diagonal() += noise.cwiseAbs2();
  cov.diagonal().array() += spec.floor;
  return CovarianceModel(std::move(cov), n);
}

// ---- json helpers -----------------------------------------------------------

namespace {

double number(const Json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) throw ModelError("'" + key + "' must be a number");
  return j.at(key).get<double>();
}

double required_number(const Json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ModelError(where + ": missing '" + key + "'");
  return number(j, key, 0.0);
}

std::string text(const Json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw ModelError(where + ": missing string '" + key + "'");
  }
  return j.at(key).get<std::string>();
}

std::vector<double> numbers(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ModelError(where + " must be an array");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) throw ModelError(where + " must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

// a scalar broadcast to n entries or an array of exactly n entries
Vector curve(const Json& j, std::size_t n, const std::string& where) {
  if (j.is_number()) return Vector::Constant(static_cast<Eigen::Index>(n), j.get<double>());
  const auto v = numbers(j, where);
  if (v.size() != n) {
    throw ModelError(where + " has " + std::to_string(v.size()) + " entries, expected " +
                     std::to_string(n));
  }
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (s.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ModelError(where + ": '" + s + "' is not a number");
  }
}

Matrix read_matrix_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ModelError("cannot open covariance file " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    for (const auto& cell : split_csv_line(line)) row.push_back(parse_double(cell, file.string()));
    rows.push_back(std::move(row));
  }
  const auto r = static_cast<Eigen::Index>(rows.size());
  Matrix m(r, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != r) {
      throw ModelError("covariance file " + file.string() + " is not square");
    }
    for (Eigen::Index k = 0; k < r; ++k) m(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return m;
}

SyntheticCovariance parse_synthetic(const Json& j) {
  SyntheticCovariance s;
  if (j.contains("factors")) {
    for (const auto& f : j.at("factors")) {
      CovarianceFactor factor;
      factor.name = f.value("name", std::string("factor"));
      factor.level = numbers(f.at("level"), "factor level");
      factor.decay = f.contains("decay") ? numbers(f.at("decay"), "factor decay")
                                         : std::vector<double>(factor.level.size(), 0.0);
      s.factors.push_back(std::move(factor));
    }
  }
  s.noise = numbers(j.at("noise"), "covariance noise");
  s.noise_decay = j.contains("noise_decay") ? numbers(j.at("noise_decay"), "covariance noise_decay")
                                            : std::vector<double>(s.noise.size(), 0.0);
  s.floor = number(j, "floor", s.floor);
  return s;
}

Json synthetic_to_json(const SyntheticCovariance& s) {
  Json j;
  j["factors"] = Json::array();
  for (const auto& f : s.factors) {
    j["factors"].push_back({{"name", f.name}, {"level", f.level}, {"decay", f.decay}});
  }
  j["noise"] = s.noise;
  j["noise_decay"] = s.noise_decay;
  j["floor"] = s.floor;
  return j;
}

Json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

MarketInstance market_from_json(const Json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ModelError("market must be a JSON object");
  MarketInstance m;

  const auto& g = j.at("grid");
  std::vector<double> deliveries = numbers(g.at("deliveries"), "grid deliveries");
  std::vector<std::vector<double>> ladders;
  for (const auto& l : g.at("trading_times")) ladders.push_back(numbers(l, "grid trading_times"));
  m.grid = ContractGrid::build(std::move(deliveries), std::move(ladders));
  const std::size_t n = m.grid.size();

  for (const auto& f : j.at("fuels")) m.fuels.push_back(f.get<std::string>());

  for (const auto& p : j.at("producers")) {
    Producer prod;
    prod.id = text(p, "id", "producer");
    prod.risk_aversion = number(p, "risk_aversion", prod.risk_aversion);
    if (p.contains("plants")) {
      for (const auto& q : p.at("plants")) {
        PowerPlant plant;
        const std::string where = "plant in producer '" + prod.id + "'";
        plant.id = text(q, "id", where);
        plant.fuel = text(q, "fuel", where);
        plant.capacity_max = required_number(q, "capacity", where);
        plant.ramp_up = number(q, "ramp_up", plant.capacity_max);
        plant.ramp_down = -std::abs(number(q, "ramp_down", plant.capacity_max));
        plant.efficiency = required_number(q, "efficiency", where);
        plant.emission_intensity = number(q, "emission_intensity", 0.0);
        prod.plants.push_back(std::move(plant));
      }
    }
    m.producers.push_back(std::move(prod));
  }
  for (const auto& c : j.at("consumers")) {
    Consumer con;
    con.id = text(c, "id", "consumer");
    con.risk_aversion = number(c, "risk_aversion", con.risk_aversion);
    con.demand_share = number(c, "demand_share", con.demand_share);
    con.retail_price = number(c, "retail_price", 0.0);
    m.consumers.push_back(std::move(con));
  }

  const auto& cv = j.at("curves");
  m.curves.fuel_prices = Matrix::Zero(static_cast<Eigen::Index>(n),
                                      static_cast<Eigen::Index>(m.fuels.size()));
  for (std::size_t l = 0; l < m.fuels.size(); ++l) {
    const auto& fp = cv.at("fuel_prices");
    if (!fp.contains(m.fuels[l])) throw ModelError("no price curve for fuel '" + m.fuels[l] + "'");
    m.curves.fuel_prices.col(static_cast<Eigen::Index>(l)) =
        curve(fp.at(m.fuels[l]), n, "fuel curve '" + m.fuels[l] + "'");
  }
  m.curves.emission_prices = curve(cv.at("emission_prices"), n, "emission curve");
  m.curves.demand = curve(cv.at("demand"), m.grid.deliveries(), "demand");
  m.curves.interest_rate = number(cv, "interest_rate", 0.0);

  const auto& cov = j.at("covariance");
  if (cov.contains("matrix")) {
    const auto& rows = cov.at("matrix");
    const auto r = static_cast<Eigen::Index>(rows.size());
    Matrix mat(r, r);
    for (Eigen::Index i = 0; i < r; ++i) {
      const auto row = numbers(rows[static_cast<std::size_t>(i)], "covariance row");
      if (static_cast<Eigen::Index>(row.size()) != r) throw ModelError("covariance matrix is not square");
      for (Eigen::Index k = 0; k < r; ++k) mat(i, k) = row[static_cast<std::size_t>(k)];
    }
    m.covariance = CovarianceModel(std::move(mat), n);
  } else if (cov.contains("file")) {
    m.covariance = CovarianceModel(read_matrix_csv(base_dir / cov.at("file").get<std::string>()), n);
  } else if (cov.contains("synthetic")) {
    m.covariance = synthetic_covariance(m.grid, m.fuels.size(), parse_synthetic(cov.at("synthetic")));
  } else {
    throw ModelError("covariance needs one of 'matrix', 'file', 'synthetic'");
  }

  m.trade_bound = number(j, "trade_bound", m.trade_bound);
  if (j.contains("costs")) {
    const auto& c = j.at("costs");
    TransactionCostSpec costs;
    costs.epsilon = c.contains("epsilon") ? curve(c.at("epsilon"), n, "epsilon")
                                          : Vector::Zero(static_cast<Eigen::Index>(n));
    costs.upsilon = c.contains("upsilon") ? curve(c.at("upsilon"), n, "upsilon")
                                          : Vector::Zero(static_cast<Eigen::Index>(n));
    m.costs = std::move(costs);
  }
  if (j.contains("tradable_map")) {
    const auto& t = j.at("tradable_map");
    for (const auto& v : t) m.tradable.of_contract.push_back(v.get<std::size_t>());
    m.tradable.count = m.tradable.of_contract.empty()
                           ? 0
                           : *std::max_element(m.tradable.of_contract.begin(),
                                               m.tradable.of_contract.end()) + 1;
  }
  if (j.contains("blocks")) {
    std::vector<BlockContract> blocks;
    for (const auto& b : j.at("blocks")) {
      BlockContract block;
      for (const auto& d : b.at("deliveries")) block.deliveries.push_back(d.get<std::size_t>());
      block.trading_times = numbers(b.at("trading_times"), "block trading_times");
      blocks.push_back(std::move(block));
    }
    m = apply_block_contracts(m, blocks);
  }

  const auto problems = validate_market(m);
  if (!problems.empty()) {
    std::string msg = "invalid market:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ModelError(msg);
  }
  return m;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("malformed JSON: ") + e.what());
  }
}

}  // namespace

MarketInstance parse_market(const std::string& text, const std::filesystem::path& base_dir) {
  try {
    return market_from_json(parse_json(text), base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("market file: ") + e.what());
  }
}

MarketInstance load_market(const std::filesystem::path& path) {
  return parse_market(read_file(path), path.parent_path());
}

std::string market_to_json(const MarketInstance& market, const SyntheticCovariance* synthetic) {
  Json j;
  const auto& grid = market.grid;
  Json ladders = Json::array();
  for (std::size_t d = 0; d < grid.deliveries(); ++d) {
    const auto t = grid.trading_times(d);
    ladders.push_back(std::vector<double>(t.begin(), t.end()));
  }
  const auto dt = grid.delivery_times();
  j["grid"] = {{"deliveries", std::vector<double>(dt.begin(), dt.end())}, {"trading_times", ladders}};
  j["fuels"] = market.fuels;
  j["producers"] = Json::array();
  for (const auto& p : market.producers) {
    Json pj = {{"id", p.id}, {"risk_aversion", p.risk_aversion}, {"plants", Json::array()}};
    for (const auto& q : p.plants) {
      pj["plants"].push_back({{"id", q.id},
                              {"fuel", q.fuel},
                              {"capacity", q.capacity_max},
                              {"ramp_up", q.ramp_up},
                              {"ramp_down", -q.ramp_down},
                              {"efficiency", q.efficiency},
                              {"emission_intensity", q.emission_intensity}});
    }
    j["producers"].push_back(std::move(pj));
  }
  j["consumers"] = Json::array();
  for (const auto& c : market.consumers) {
    j["consumers"].push_back({{"id", c.id},
                              {"risk_aversion", c.risk_aversion},
                              {"demand_share", c.demand_share},
                              {"retail_price", c.retail_price}});
  }
  Json fuel_prices = Json::object();
  for (std::size_t l = 0; l < market.fuels.size(); ++l) {
    fuel_prices[market.fuels[l]] = to_json(market.curves.fuel_prices.col(static_cast<Eigen::Index>(l)));
  }
  j["curves"] = {{"fuel_prices", fuel_prices},
                 {"emission_prices", to_json(market.curves.emission_prices)},
                 {"demand", to_json(market.curves.demand)},
                 {"interest_rate", market.curves.interest_rate}};
  if (synthetic) {
    j["covariance"] = {{"synthetic", synthetic_to_json(*synthetic)}};
  } else {
    Json rows = Json::array();
    const auto& cov = market.covariance.stacked();
    for (Eigen::Index i = 0; i < cov.rows(); ++i) rows.push_back(to_json(cov.row(i).transpose()));
    j["covariance"] = {{"matrix", rows}};
  }
  j["trade_bound"] = market.trade_bound;
  if (market.costs) {
    j["costs"] = {{"epsilon", to_json(market.costs->epsilon)}, {"upsilon", to_json(market.costs->upsilon)}};
  }
  if (!market.tradable.of_contract.empty() && !market.tradable.is_identity()) {
    j["tradable_map"] = market.tradable.of_contract;
  }
  return j.dump(2) + "\n";
}

// ---- overrides and scenarios ----------------------------------------------------

void apply_override(MarketInstance& market, const std::string& parameter, double value) {
  if (!std::isfinite(value)) throw ModelError("override '" + parameter + "' is not finite");
  const auto n = static_cast<Eigen::Index>(market.grid.size());
  auto ensure_costs = [&]() -> TransactionCostSpec& {
    if (!market.costs) market.costs = TransactionCostSpec{Vector::Zero(n), Vector::Zero(n)};
    return *market.costs;
  };
  const auto colon = parameter.find(':');
  const std::string key = parameter.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : parameter.substr(colon + 1);

  if (key == "risk_aversion" && arg.empty()) {
    for (auto& p : market.producers) p.risk_aversion = value;
    for (auto& c : market.consumers) c.risk_aversion = value;
  } else if (key == "risk_aversion") {
    bool found = false;
    for (auto& p : market.producers) {
      if (p.id == arg) p.risk_aversion = value, found = true;
    }
    for (auto& c : market.consumers) {
      if (c.id == arg) c.risk_aversion = value, found = true;
    }
    if (!found) throw ModelError("override '" + parameter + "': no player '" + arg + "'");
  } else if (key == "producer_risk_aversion") {
    for (auto& p : market.producers) p.risk_aversion = value;
  } else if (key == "consumer_risk_aversion") {
    for (auto& c : market.consumers) c.risk_aversion = value;
  } else if (key == "epsilon") {
    ensure_costs().epsilon.setConstant(value);
  } else if (key == "upsilon") {
    ensure_costs().upsilon.setConstant(value);
  } else if (key == "epsilon_first") {
    ensure_costs().epsilon[0] = value;
  } else if (key == "fuel_shift") {
    const auto l = static_cast<Eigen::Index>(market.fuel_index(arg));
    auto col = market.curves.fuel_prices.col(l);
    col.array() += value * col.mean();
  } else if (key == "demand_scale") {
    market.curves.demand *= value;
  } else {
    throw ModelError("unknown override parameter '" + parameter + "'");
  }
}

ScenarioConfig parse_scenario(const std::string& source, const std::filesystem::path& base_dir) {
  ScenarioConfig cfg;
  try {
    const Json j = parse_json(source);
    if (!j.contains("market")) throw ModelError("scenario: missing 'market'");
    const auto& mj = j.at("market");
    if (mj.is_string()) {
      const auto ref = mj.get<std::string>();
      if (ref == "builtin:base") {
        cfg.market = base_market();
      } else if (ref == "builtin:contango") {
        cfg.market = contango_market();
      } else if (ref == "builtin:uk") {
        cfg.market = uk_scale_market();
      } else {
        const auto path = base_dir / ref;
        if (!std::filesystem::exists(path)) throw ModelError("market file " + path.string() + " not found");
        cfg.market = load_market(path);
      }
    } else {
      cfg.market = market_from_json(mj, base_dir);
    }
    if (j.contains("overrides")) {
      for (const auto& [key, value] : j.at("overrides").items()) {
        if (!value.is_number()) throw ModelError("override '" + key + "' must be a number");
        apply_override(cfg.market, key, value.get<double>());
      }
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      SweepAxis axis{text(s, "parameter", "sweep"), numbers(s.at("values"), "sweep values")};
      if (axis.values.empty()) throw ModelError("sweep has no values");
      for (double v : axis.values) {
        if (!std::isfinite(v)) throw ModelError("sweep values must be finite");
      }
      // reject unknown parameters before anything runs
      MarketInstance probe = cfg.market;
      apply_override(probe, axis.parameter, axis.values.front());
      cfg.sweep = std::move(axis);
    }
    cfg.tolerance = number(j, "tolerance", cfg.tolerance);
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("output")) cfg.output = j.at("output").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("scenario file: ") + e.what());
  }
  return cfg;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  return parse_scenario(read_file(path), path.parent_path());
}

// ---- shipped markets ------------------------------------------------------------

namespace {

PowerPlant plant(std::string id, std::string fuel, double capacity, double c, double g) {
  PowerPlant p;
  p.id = std::move(id);
  p.fuel = std::move(fuel);
  p.capacity_max = capacity;
  p.ramp_up = capacity;
  p.ramp_down = -capacity;
  p.efficiency = c;
  p.emission_intensity = g;
  return p;
}

// assets: electricity, gas, coal, emissions
SyntheticCovariance two_fuel_covariance(const std::array<double, 16>& q) {
  const auto [a0, da, b0, db, e0, de, w, wd, gg, go, cc, co, em, emo, gd, cd] = q;
  SyntheticCovariance s;
  s.factors = {
      {"gas", {a0, gg, 0.0, 0.0}, {da, gd, 0.0, 0.0}},
      {"coal", {b0, 0.0, cc, 0.0}, {db, 0.0, cd, 0.0}},
      {"carbon", {e0, 0.0, 0.0, em}, {de, 0.0, 0.0, 0.0}},
      {"gas_own", {0.0, go, 0.0, 0.0}, {0.0, 0.0, 0.0, 0.0}},
      {"coal_own", {0.0, 0.0, co, 0.0}, {0.0, 0.0, 0.0, 0.0}},
      {"carbon_own", {0.0, 0.0, 0.0, emo}, {0.0, 0.0, 0.0, 0.0}},
  };
  s.noise = {w, 0.0, 0.0, 0.0};
  s.noise_decay = {wd, 0.0, 0.0, 0.0};
  s.floor = 1e-2;
  return s;
}

MarketInstance five_period_fleet() {
  MarketInstance m;
  m.grid = ContractGrid::build({1.0}, {{0.2, 0.4, 0.6, 0.8, 1.0}});
  m.fuels = {"gas", "coal"};
  m.producers.push_back({"P1", 1e-6,
                         {plant("coal1", "coal", 2000, 0.35, 0.90),
                          plant("ccgt1", "gas", 2000, 0.62, 0.37)}});
  m.producers.push_back({"P2", 1e-6,
                         {plant("coal2", "coal", 2000, 0.37, 0.92),
                          plant("ccgt2", "gas", 2000, 0.66, 0.38),
                          plant("ccgt3", "gas", 2000, 0.70, 0.39),
                          plant("ocgt", "gas", 2000, 0.95, 0.50)}});
  m.consumers.push_back({"C1", 1e-6, 0.6, 0.0});
  m.consumers.push_back({"C2", 1e-6, 0.4, 0.0});
  m.curves.fuel_prices = Matrix(5, 2);
  m.curves.fuel_prices.col(0).setConstant(69.30);
  m.curves.fuel_prices.col(1).setConstant(57.87);
  m.curves.emission_prices = Vector::Constant(5, 3.883);
  m.curves.demand = Vector::Constant(1, 7000.0);
  m.trade_bound = 1e6;
  return m;
}

}  // namespace

SyntheticCovariance base_covariance() {
  return two_fuel_covariance(
      {6.8, -1.0, 3.8, 0.6, 0.1, -1.75, 4.2, -0.4, 5.2, 1.7, 0.05, 0.05, 3.5, 0.5, 1.75, -0.2});
}

SyntheticCovariance contango_covariance() {
  return two_fuel_covariance(
      {4.6, 0.64, 4.26, -4.33, 3.19, 2.06, 3.31, 2.89, 4.32, 1.06, 2.49, 3.85, 1.57, 0.9, 1.55, 0.28});
}

MarketInstance base_market() {
  auto m = five_period_fleet();
  m.covariance = synthetic_covariance(m.grid, m.fuels.size(), base_covariance());
  return m;
}

MarketInstance contango_market() {
  auto m = five_period_fleet();
  m.covariance = synthetic_covariance(m.grid, m.fuels.size(), contango_covariance());
  return m;
}

MarketInstance uk_scale_market(const UkScaleOptions& o) {
  if (o.plants == 0 || o.deliveries == 0 || o.producers == 0 || o.consumers == 0) {
    throw ModelError("scale market needs plants, deliveries, producers and consumers");
  }
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  MarketInstance m;
  // times in days: one day-ahead auction at 0, deliveries in half hours of day 1
  std::vector<double> deliveries;
  std::vector<std::vector<double>> ladders;
  for (std::size_t j = 0; j < o.deliveries; ++j) {
    const double t = 1.0 + (static_cast<double>(j) + 0.5) / static_cast<double>(o.deliveries);
    deliveries.push_back(t);
    ladders.push_back({0.0, t});
  }
  m.grid = ContractGrid::build(deliveries, ladders);
  m.fuels = {"gas", "coal"};

  double total_capacity = 0.0;
  m.producers.resize(o.producers);
  for (std::size_t p = 0; p < o.producers; ++p) {
    m.producers[p].id = "P" + std::to_string(p + 1);
    m.producers[p].risk_aversion = o.risk_aversion;
  }
  for (std::size_t k = 0; k < o.plants; ++k) {
    const bool gas = u(rng) < 0.6;
    const double cap = gas ? 200.0 + 500.0 * u(rng) : 300.0 + 700.0 * u(rng);
    const double c = gas ? 0.45 + 0.25 * u(rng) : 0.33 + 0.07 * u(rng);
    const double g = gas ? 0.35 + 0.1 * u(rng) : 0.85 + 0.1 * u(rng);
    auto pl = plant("G" + std::to_string(k + 1), gas ? "gas" : "coal", cap, c, g);
    pl.ramp_up = cap * (gas ? 0.5 : 0.25);
    pl.ramp_down = -pl.ramp_up;
    total_capacity += cap;
    m.producers[k % o.producers].plants.push_back(std::move(pl));
  }
  for (std::size_t c = 0; c < o.consumers; ++c) {
    m.consumers.push_back({"C" + std::to_string(c + 1), o.risk_aversion,
                           1.0 / static_cast<double>(o.consumers), 0.0});
  }

  const auto n = static_cast<Eigen::Index>(m.grid.size());
  m.curves.fuel_prices = Matrix(n, 2);
  m.curves.fuel_prices.col(0).setConstant(69.30);
  m.curves.fuel_prices.col(1).setConstant(57.87);
  m.curves.emission_prices = Vector::Constant(n, 3.883);
  // daily shape between 45% and 75% of capacity, smooth enough for the ramps
  m.curves.demand = Vector(static_cast<Eigen::Index>(o.deliveries));
  const double pi = std::acos(-1.0);
  for (std::size_t j = 0; j < o.deliveries; ++j) {
    const double x = static_cast<double>(j) / static_cast<double>(o.deliveries);
    m.curves.demand[static_cast<Eigen::Index>(j)] =
        total_capacity * (0.6 - 0.15 * std::cos(2.0 * pi * x));
  }
  m.trade_bound = 10.0 * total_capacity;
  m.covariance = synthetic_covariance(m.grid, m.fuels.size(), base_covariance());
  return m;
}

// ---- runs ---------------------------------------------------------------------

std::string format_number(double value) {
  std::ostringstream os;
  os << std::setprecision(12) << value;
  return os.str();
}

namespace {

struct DiagnosticRow {
  std::string check;
  std::string player;
  double value;
  double threshold;
  bool pass;
};

void write_diagnostics(const std::filesystem::path& file, const std::string& status,
                       const std::string& message, const std::vector<DiagnosticRow>& rows) {
  std::ofstream out(file);
  out << "check,player,value,threshold,pass\n";
  out << "status," << status << ",,,\n";
  if (!message.empty()) {
    std::string m = message;
    std::replace(m.begin(), m.end(), '\n', ' ');
    std::replace(m.begin(), m.end(), ',', ';');
    out << "message," << m << ",,,\n";
  }
  for (const auto& r : rows) {
    out << r.check << ',' << r.player << ',' << format_number(r.value) << ','
        << format_number(r.threshold) << ',' << (r.pass ? 1 : 0) << '\n';
  }
}

void write_prices(const std::filesystem::path& file, const MarketInstance& market,
                  const Vector& prices) {
  std::ofstream out(file);
  out << "delivery,trading_time,expected_price\n";
  const auto& grid = market.grid;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    out << format_number(grid.delivery_time_of(k)) << ',' << format_number(grid.trading_time(k))
        << ',' << format_number(prices[static_cast<Eigen::Index>(k)]) << '\n';
  }
}

void write_volumes(const std::filesystem::path& file, const MarketInstance& market,
                   const EquilibriumSolution& sol) {
  std::ofstream out(file);
  out << "player,block,contract,item,value\n";
  const std::size_t n = market.grid.size();
  const std::size_t nt = market.tradable_count();
  const std::size_t nl = market.fuels.size();
  const std::size_t nj = market.grid.deliveries();
  for (std::size_t k = 0; k < sol.positions.size(); ++k) {
    const auto& pos = sol.positions[k];
    auto row = [&](const char* block, std::size_t contract, const std::string& item, double v) {
      out << pos.id << ',' << block << ',' << contract << ',' << item << ',' << format_number(v)
          << '\n';
    };
    for (std::size_t t = 0; t < nt; ++t) row("V", t, "", pos.v[static_cast<Eigen::Index>(t)]);
    if (!pos.producer) continue;
    const auto& producer = market.producers[k];
    std::size_t at = nt;
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t l = 0; l < nl; ++l) row("F", c, market.fuels[l], pos.v[static_cast<Eigen::Index>(at++)]);
    }
    for (std::size_t c = 0; c < n; ++c) row("O", c, "", pos.v[static_cast<Eigen::Index>(at++)]);
    const auto order = plant_order(producer, market.fuels);
    for (std::size_t j = 0; j < nj; ++j) {
      for (std::size_t r : order) row("W", j, producer.plants[r].id, pos.v[static_cast<Eigen::Index>(at++)]);
    }
  }
}

void fill_statistics(RunSummary& s, const MarketInstance& market, const EquilibriumSolution& sol) {
  const auto& grid = market.grid;
  const std::size_t ladder = grid.ladder_size(0);
  s.slope = sol.prices[static_cast<Eigen::Index>(ladder - 1)] - sol.prices[0];
  s.price_level = sol.prices.mean();
  s.clearing_residual = sol.clearing_residual;
  s.possibly_nonunique = sol.possibly_nonunique;

  const auto map = market.tradable_map();
  Vector long_volume = Vector::Zero(static_cast<Eigen::Index>(map.count));
  for (const auto& pos : sol.positions) {
    for (Eigen::Index t = 0; t < long_volume.size(); ++t) long_volume[t] += std::max(pos.v[t], 0.0);
  }
  std::vector<double> period;
  for (std::size_t i = 0; i < ladder; ++i) {
    period.push_back(long_volume[static_cast<Eigen::Index>(map.of_contract[i])]);
  }
  const auto [lo, hi] = std::minmax_element(period.begin(), period.end());
  double sum = 0.0;
  for (double v : period) sum += v;
  s.volume_mean = sum / static_cast<double>(period.size());
  s.volume_dispersion = *hi - *lo;
  s.first_volume = period.front();
}

}  // namespace

RunSummary run_solve(const MarketInstance& market, const std::filesystem::path& out,
                     const RunOptions& options) {
  std::filesystem::create_directories(out);
  RunSummary s;
  EquilibriumOptions eo;
  eo.qp.tolerance = options.tolerance;
  eo.check_feasibility = options.feasibility_check;

  EquilibriumSolution sol;
  try {
    sol = solve_equilibrium(market, eo);
    // The solver's stopping rule is relative to the largest bound, which can
    // leave absolute residuals above the check threshold. Tighten and retry.
    for (int retry = 0; retry < options.tightening_retries &&
                        sol.raw.kkt.worst() > options.kkt_tolerance && eo.qp.tolerance > 1e-16;
         ++retry) {
      eo.qp.tolerance *= 1e-2;
      eo.check_feasibility = false;
      sol = solve_equilibrium(market, eo);
    }
  } catch (const InfeasibleMarket& e) {
    s.status = "infeasible";
    s.exit_code = 2;
    write_diagnostics(out / "diagnostics.csv", s.status, e.what(), {});
    return s;
  } catch (const SolverFailure& e) {
    s.status = "solver_failure";
    s.exit_code = 3;
    s.max_kkt = e.report.worst();
    write_diagnostics(out / "diagnostics.csv", s.status, e.what(),
                      {{"stacked_kkt", "", e.report.worst(), options.tolerance, false}});
    return s;
  }

  write_prices(out / "prices.csv", market, sol.prices);
  write_volumes(out / "volumes.csv", market, sol);
  fill_statistics(s, market, sol);

  std::vector<DiagnosticRow> rows;
  rows.push_back({"stacked_kkt", "", sol.raw.kkt.worst(), options.kkt_tolerance,
                  sol.raw.kkt.passes(options.kkt_tolerance)});
  const double sum_d = market.curves.demand.sum();
  const double clearing_tol = 1e-8 * (1.0 + sum_d);
  rows.push_back({"clearing_residual", "", sol.clearing_residual, clearing_tol,
                  sol.clearing_residual <= clearing_tol});
  bool ok = rows[0].pass && rows[1].pass;
  if (options.verify) {
    for (std::size_t p = 0; p < sol.players(); ++p) {
      const double r = player_kkt(market, sol, p).worst();
      s.max_kkt = std::max(s.max_kkt, r);
      rows.push_back({"player_kkt", sol.positions[p].id, r, options.kkt_tolerance,
                      r <= options.kkt_tolerance});
      ok = ok && rows.back().pass;
    }
    const auto nash = verify_nash(market, sol, options.nash_tolerance);
    for (std::size_t p = 0; p < nash.relative_gaps.size(); ++p) {
      const double g = nash.relative_gaps[p];
      rows.push_back({"nash_gap", sol.positions[p].id, g, options.nash_tolerance,
                      std::abs(g) <= options.nash_tolerance});
    }
    s.max_nash_gap = nash.max_gap;
    ok = ok && nash.pass;
  } else {
    s.max_kkt = sol.raw.kkt.worst();
  }
  rows.push_back({"possibly_nonunique", "", sol.possibly_nonunique ? 1.0 : 0.0, 0.0, true});
  if (!ok) {
    s.status = "check_failed";
    s.exit_code = 1;
  }
  write_diagnostics(out / "diagnostics.csv", s.status, "", rows);
  return s;
}

std::vector<RunSummary> run_sweep(const MarketInstance& market, const SweepAxis& axis,
                                  const std::filesystem::path& out, const RunOptions& options,
                                  unsigned jobs) {
  std::filesystem::create_directories(out);
  const std::size_t count = axis.values.size();
  std::vector<RunSummary> runs(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < count; i = next++) {
      const double v = axis.values[i];
      const std::string label = axis.parameter + "=" + format_number(v);
      const auto dir = out / (std::to_string(i) + "_" + format_number(v));
      try {
        MarketInstance m = market;
        apply_override(m, axis.parameter, v);
        runs[i] = run_solve(m, dir, options);
      } catch (const std::exception& e) {
        std::filesystem::create_directories(dir);
        write_diagnostics(dir / "diagnostics.csv", "invalid", e.what(), {});
        runs[i].status = "invalid";
        runs[i].exit_code = 4;
      }
      runs[i].label = label;
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(count)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  write_summary(runs, out / "summary.csv");
  return runs;
}

void write_summary(const std::vector<RunSummary>& runs, const std::filesystem::path& file) {
  std::ofstream out(file);
  out << "label,status,slope_sign,slope,price_level,volume_mean,volume_dispersion,first_volume,"
         "max_kkt,max_nash_gap,clearing_residual,possibly_nonunique,exit_code\n";
  for (const auto& r : runs) {
    const int sign = r.slope > 0.0 ? 1 : (r.slope < 0.0 ? -1 : 0);
    out << r.label << ',' << r.status << ',' << sign << ',' << format_number(r.slope) << ','
        << format_number(r.price_level) << ',' << format_number(r.volume_mean) << ','
        << format_number(r.volume_dispersion) << ',' << format_number(r.first_volume) << ','
        << format_number(r.max_kkt) << ',' << format_number(r.max_nash_gap) << ','
        << format_number(r.clearing_residual) << ',' << (r.possibly_nonunique ? 1 : 0) << ','
        << r.exit_code << '\n';
  }
}

}  // namespace fwdeq
