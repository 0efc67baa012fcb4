#pragma once

#include "fwdeq/calibration.hpp"
#include "fwdeq/equilibrium.hpp"
#include "fwdeq/extensions.hpp"
#include "fwdeq/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fwdeq {

// ---- synthetic covariance -------------------------------------------------

/// Factor model for [Pi | G | G_em]. Assets are ordered electricity, the
/// market fuels, emissions. Each factor loads asset a of contract k with
///   level[a] exp(-decay[a] (T_k - t_k)),
/// the same factor for every delivery. On top, each asset carries independent
/// per-contract noise noise[a] exp(-noise_decay[a] (T_k - t_k)) and the
/// diagonal gets `floor`.
struct CovarianceFactor {
  std::string name;
  std::vector<double> level;  // per asset
  std::vector<double> decay;  // per asset, per unit lead time
};

struct SyntheticCovariance {
  std::vector<CovarianceFactor> factors;
  std::vector<double> noise;        // per asset
  std::vector<double> noise_decay;  // per asset
  double floor = 1e-2;
};

CovarianceModel synthetic_covariance(const ContractGrid& grid, std::size_t fuels,
                                     const SyntheticCovariance& spec);

// ---- market files ---------------------------------------------------------

/// Parses a market description (JSON). Relative file references resolve
/// against `base_dir`. Throws ModelError on malformed input.
MarketInstance parse_market(const std::string& text, const std::filesystem::path& base_dir = {});
MarketInstance load_market(const std::filesystem::path& path);
/// Writes the covariance as a full matrix, or as the given synthetic spec
/// (which must be the one the market was built from).
std::string market_to_json(const MarketInstance& market,
                           const SyntheticCovariance* synthetic = nullptr);

// ---- scenarios ------------------------------------------------------------

/// Parameters a scenario can override or sweep:
///   risk_aversion, producer_risk_aversion, consumer_risk_aversion,
///   risk_aversion:<player id>,
///   epsilon, upsilon (uniform over all contracts),
///   epsilon_first (first contract only, others keep their value),
///   fuel_shift:<fuel> (adds value * mean of that fuel curve to every point),
///   demand_scale.
void apply_override(MarketInstance& market, const std::string& parameter, double value);

struct SweepAxis {
  std::string parameter;
  std::vector<double> values;
};

struct ScenarioConfig {
  MarketInstance market;  // base market with overrides applied
  std::optional<SweepAxis> sweep;
  std::filesystem::path output;
  double tolerance = 1e-10;
  std::uint64_t seed = 1;
};

/// Scenario file: {"market": path or object, "overrides": {...},
/// "sweep": {"parameter": ..., "values": [...]}, "tolerance", "seed", "output"}.
ScenarioConfig parse_scenario(const std::string& text, const std::filesystem::path& base_dir = {});
ScenarioConfig load_scenario(const std::filesystem::path& path);

/// The five-period, one-delivery market with gas and coal used for the
/// term-structure experiments. Covariance is synthetic.
MarketInstance base_market();
SyntheticCovariance base_covariance();

/// Same fleet and curves as base_market with a covariance whose electricity
/// loading on coal grows sharply with lead time. Under it the ladder slopes
/// up when everybody is equally risk averse and turns over when consumers
/// are far more risk averse than producers.
MarketInstance contango_market();
SyntheticCovariance contango_covariance();

struct UkScaleOptions {
  std::size_t plants = 300;
  std::size_t deliveries = 48;  // half hours
  std::size_t producers = 20;
  std::size_t consumers = 8;
  double risk_aversion = 1e-5;
  std::uint64_t seed = 2013;
};

/// Synthetic fleet with two trading times per delivery: a day-ahead time
/// shared by every delivery and the delivery itself.
MarketInstance uk_scale_market(const UkScaleOptions& options = {});

// ---- runs -----------------------------------------------------------------

/// Summary statistics of one solve, as written to summary.csv.
struct RunSummary {
  std::string label;
  std::string status = "ok";  // ok, infeasible, solver_failure, check_failed
  double slope = 0.0;         // price(last) - price(first) on delivery 0
  double price_level = 0.0;   // mean expected price
  double volume_mean = 0.0;   // mean long volume per trading period, delivery 0
  double volume_dispersion = 0.0;  // max - min of the same
  double first_volume = 0.0;       // long volume on the first contract
  double max_kkt = 0.0;
  double max_nash_gap = 0.0;
  double clearing_residual = 0.0;
  bool possibly_nonunique = false;
  int exit_code = 0;
};

struct RunOptions {
  double tolerance = 1e-10;      // solver
  double kkt_tolerance = 1e-7;   // per-player KKT residual check
  double nash_tolerance = 1e-6;  // relative best-response gap check
  bool verify = true;            // per-player KKT and best responses
  bool feasibility_check = true;
  int tightening_retries = 3;    // re-solves at 1/100 the tolerance while the stacked KKT check fails
};

/// Solves the market and writes prices.csv, volumes.csv and diagnostics.csv
/// into `out`. Exit codes: 0 all checks pass, 1 checks failed, 2 infeasible,
/// 3 solver failure. Diagnostics are written in every case.
RunSummary run_solve(const MarketInstance& market, const std::filesystem::path& out,
                     const RunOptions& options = {});

/// One run per sweep value in out/<index>_<value>/ plus summary.csv.
/// Values run on up to `jobs` threads; outputs do not depend on `jobs`.
std::vector<RunSummary> run_sweep(const MarketInstance& market, const SweepAxis& axis,
                                  const std::filesystem::path& out, const RunOptions& options = {},
                                  unsigned jobs = 1);

void write_summary(const std::vector<RunSummary>& runs, const std::filesystem::path& file);

/// Formats with 12 significant digits.
std::string format_number(double value);

}  // namespace fwdeq
