// fwdeq: scenario-driven front end for the forward-market equilibrium engine.
//
// Exit codes: 0 ok, 1 verification checks failed, 2 infeasible market,
// 3 solver failure, 4 invalid input.

#include "fwdeq/calibration.hpp"
#include "fwdeq/extensions.hpp"
#include "fwdeq/scenario.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace fwdeq;

namespace {

constexpr int kInvalidInput = 4;

std::string default_out(const std::string& given, const fs::path& from_scenario) {
  if (!given.empty()) return given;
  if (!from_scenario.empty()) return from_scenario.string();
  if (const char* env = std::getenv("FWDEQ_OUT_DIR")) return env;
  return "fwdeq_out";
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

// Reads a CSV with a header row into named columns.
std::map<std::string, std::vector<std::string>> read_columns(const fs::path& file,
                                                             const std::vector<std::string>& need) {
  std::ifstream in(file);
  if (!in) throw ModelError("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw ModelError(file.string() + " is empty");
  const auto header = split(line);
  std::map<std::string, std::vector<std::string>> cols;
  for (const auto& h : header) cols[h];
  for (const auto& n : need) {
    if (!cols.count(n)) throw ModelError(file.string() + ": missing column '" + n + "'");
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw ModelError(file.string() + ": row " + std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " cells");
    }
    for (std::size_t i = 0; i < header.size(); ++i) cols[header[i]].push_back(cells[i]);
  }
  return cols;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ModelError("'" + s + "' is not a number");
  }
  if (used != s.size()) throw ModelError("'" + s + "' is not a number");
  return v;
}

// ---- solve / sweep --------------------------------------------------------------

struct RunArgs {
  std::string scenario;
  std::string out;
  double tol = 0.0;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  bool no_verify = false;
  bool no_phase1 = false;
};

RunOptions run_options(const RunArgs& a, const ScenarioConfig& cfg) {
  RunOptions o;
  o.tolerance = a.tol > 0.0 ? a.tol : cfg.tolerance;
  o.verify = !a.no_verify;
  o.feasibility_check = !a.no_phase1;
  return o;
}

int cmd_solve(const RunArgs& a) {
  const auto cfg = load_scenario(a.scenario);
  const fs::path out = default_out(a.out, cfg.output);
  const auto s = run_solve(cfg.market, out, run_options(a, cfg));
  std::cout << "status " << s.status << ", slope " << format_number(s.slope) << ", level "
            << format_number(s.price_level) << " -> " << out.string() << "\n";
  return s.exit_code;
}

int cmd_sweep(const RunArgs& a) {
  const auto cfg = load_scenario(a.scenario);
  if (!cfg.sweep) throw ModelError("scenario " + a.scenario + " has no sweep");
  const fs::path out = default_out(a.out, cfg.output);
  const auto runs = run_sweep(cfg.market, *cfg.sweep, out, run_options(a, cfg), a.jobs);
  int code = 0;
  for (const auto& r : runs) {
    std::cout << r.label << ": " << r.status << ", slope " << format_number(r.slope) << "\n";
    if (r.exit_code != 0 && code == 0) code = r.exit_code;
  }
  std::cout << "summary -> " << (out / "summary.csv").string() << "\n";
  return code;
}

// ---- calibrate --------------------------------------------------------------

struct CalibrateArgs {
  std::string history;
  std::string out;
  unsigned jobs = 1;
  double temperature = 1.0;
};

int cmd_calibrate(const CalibrateArgs& a) {
  const auto cols = read_columns(
      a.history, {"plant", "production", "capacity", "electricity", "fuel", "emission"});
  // plants in order of first appearance
  std::vector<std::string> names;
  std::map<std::string, std::vector<std::size_t>> rows;
  const auto& plant = cols.at("plant");
  for (std::size_t i = 0; i < plant.size(); ++i) {
    if (!rows.count(plant[i])) names.push_back(plant[i]);
    rows[plant[i]].push_back(i);
  }
  std::vector<PlantHistory> histories;
  for (const auto& name : names) {
    const auto& idx = rows[name];
    const auto m = static_cast<Eigen::Index>(idx.size());
    PlantHistory h;
    h.plant = name;
    h.production.resize(m);
    h.capacity.resize(m);
    h.electricity.resize(m);
    h.fuel.resize(m);
    h.emission.resize(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto r = idx[static_cast<std::size_t>(k)];
      h.production[k] = to_double(cols.at("production")[r]);
      h.capacity[k] = to_double(cols.at("capacity")[r]);
      h.electricity[k] = to_double(cols.at("electricity")[r]);
      h.fuel[k] = to_double(cols.at("fuel")[r]);
      h.emission[k] = to_double(cols.at("emission")[r]);
    }
    histories.push_back(std::move(h));
  }

  FitOptions options;
  options.temperature = a.temperature;
  std::vector<PlantCalibration> fits(histories.size());
  std::vector<std::string> errors(histories.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < histories.size(); i = next++) {
      try {
        fits[i] = fit_plant(histories[i], options);
      } catch (const CalibrationError& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < std::max(1u, a.jobs); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  const fs::path out = default_out(a.out, {});
  fs::create_directories(out);
  std::ofstream csv(out / "calibration.csv");
  csv << "plant,efficiency,emission_intensity,margin_offset,sse,converged,identifiable,"
         "degenerate,samples,status\n";
  for (std::size_t i = 0; i < histories.size(); ++i) {
    if (!errors[i].empty()) {
      std::cerr << "warning: " << errors[i] << "\n";
      csv << histories[i].plant << ",,,,,0,0,0,0,skipped\n";
      continue;
    }
    const auto& f = fits[i];
    std::string status = "ok";
    if (!f.converged) status = "not_converged";
    if (!f.identifiable) status = "unidentifiable";
    if (f.degenerate) status = "degenerate";
    if (status != "ok") std::cerr << "warning: plant '" << f.plant << "' is " << status << "\n";
    csv << f.plant << ',' << format_number(f.efficiency) << ','
        << format_number(f.emission_intensity) << ',' << format_number(f.margin_offset) << ','
        << format_number(f.sse) << ',' << f.converged << ',' << f.identifiable << ','
        << f.degenerate << ',' << f.samples << ',' << status << '\n';
  }
  std::cout << histories.size() << " plants -> " << (out / "calibration.csv").string() << "\n";
  return 0;
}

// ---- convert ----------------------------------------------------------------

struct ConvertArgs {
  std::string input;
  std::string out;
  std::string to;
  double rate = 0.0;
};

int cmd_convert(const ConvertArgs& a) {
  const auto cols = read_columns(a.input, {"delivery", "trading_time", "price"});
  const auto& d = cols.at("delivery");
  std::ostringstream result;
  result << "delivery,trading_time,price\n";
  std::size_t i = 0;
  while (i < d.size()) {
    const double delivery = to_double(d[i]);
    std::vector<double> times, prices;
    for (; i < d.size() && to_double(d[i]) == delivery; ++i) {
      times.push_back(to_double(cols.at("trading_time")[i]));
      prices.push_back(to_double(cols.at("price")[i]));
    }
    if (times.back() != delivery) {
      throw ModelError("ladder for delivery " + format_number(delivery) +
                       " must end at the delivery time");
    }
    const auto converted = a.to == "forwards" ? forwards_from_futures(prices, times, a.rate)
                                              : futures_from_forwards(prices, times, a.rate);
    for (std::size_t k = 0; k < times.size(); ++k) {
      result << format_number(delivery) << ',' << format_number(times[k]) << ','
             << format_number(converted[k]) << '\n';
    }
  }
  if (a.out.empty()) {
    std::cout << result.str();
  } else {
    std::ofstream(a.out) << result.str();
  }
  return 0;
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string what;
  std::string out;
  std::uint64_t seed = 2013;
  std::size_t plants = 20;
  std::size_t samples = 5000;
};

int cmd_generate(const GenerateArgs& a) {
  const fs::path out = default_out(a.out, {});
  fs::create_directories(out);
  if (a.what == "base") {
    const auto cov = base_covariance();
    std::ofstream(out / "base_market.json") << market_to_json(base_market(), &cov);
  } else if (a.what == "contango") {
    const auto cov = contango_covariance();
    std::ofstream(out / "contango_market.json") << market_to_json(contango_market(), &cov);
  } else if (a.what == "uk") {
    UkScaleOptions o;
    o.seed = a.seed;
    const auto cov = base_covariance();
    std::ofstream(out / "uk_market.json") << market_to_json(uk_scale_market(o), &cov);
  } else if (a.what == "history") {
    std::mt19937_64 rng(a.seed);
    std::uniform_real_distribution<double> c(0.4, 2.0), g(0.2, 1.2), off(5.0, 40.0);
    std::ofstream hist(out / "history.csv");
    std::ofstream truth(out / "truth.csv");
    hist << "plant,production,capacity,electricity,fuel,emission\n";
    truth << "plant,efficiency,emission_intensity,margin_offset\n";
    for (std::size_t k = 0; k < a.plants; ++k) {
      const std::string name = "plant" + std::to_string(k + 1);
      const PlantParams p{c(rng), g(rng), off(rng)};
      const auto h = synthetic_history({p, 0.02, a.samples, 100.0}, rng);
      truth << name << ',' << format_number(p[0]) << ',' << format_number(p[1]) << ','
            << format_number(p[2]) << '\n';
      for (Eigen::Index j = 0; j < h.production.size(); ++j) {
        hist << name << ',' << format_number(h.production[j]) << ',' << format_number(h.capacity[j])
             << ',' << format_number(h.electricity[j]) << ',' << format_number(h.fuel[j]) << ','
             << format_number(h.emission[j]) << '\n';
      }
    }
  } else {
    throw ModelError("unknown generator '" + a.what + "'");
  }
  std::cout << a.what << " -> " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forward-market equilibrium engine"};
  app.require_subcommand(1);

  RunArgs run;
  auto add_run_flags = [&run](CLI::App* c) {
    c->add_option("--scenario", run.scenario, "scenario JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--out", run.out, "output directory (default: scenario, $FWDEQ_OUT_DIR)");
    c->add_option("--tol", run.tol, "solver tolerance");
    c->add_option("--seed", run.seed, "seed (runs are deterministic)");
    c->add_option("--jobs", run.jobs, "threads")->check(CLI::PositiveNumber);
    c->add_flag("--no-verify", run.no_verify, "skip per-player KKT and best responses");
    c->add_flag("--no-phase1", run.no_phase1, "skip the strict feasibility checks");
  };
  auto* solve = app.add_subcommand("solve", "solve one scenario");
  add_run_flags(solve);
  auto* sweep = app.add_subcommand("sweep", "solve every value of the scenario's sweep");
  add_run_flags(sweep);

  CalibrateArgs cal;
  auto* calibrate = app.add_subcommand("calibrate", "fit plant parameters to production history");
  calibrate->add_option("--history", cal.history, "CSV: plant,production,capacity,electricity,fuel,emission")
      ->required()
      ->check(CLI::ExistingFile);
  calibrate->add_option("--out", cal.out, "output directory");
  calibrate->add_option("--jobs", cal.jobs, "threads")->check(CLI::PositiveNumber);
  calibrate->add_option("--temperature", cal.temperature, "logistic temperature");
  std::uint64_t unused_seed = 0;
  calibrate->add_option("--seed", unused_seed, "accepted for symmetry; fits are deterministic");

  ConvertArgs conv;
  auto* convert = app.add_subcommand("convert", "convert expected futures and forward ladders");
  convert->add_option("--input", conv.input, "CSV: delivery,trading_time,price")
      ->required()
      ->check(CLI::ExistingFile);
  convert->add_option("--to", conv.to, "target curve")
      ->required()
      ->check(CLI::IsMember({"forwards", "futures"}));
  convert->add_option("--rate", conv.rate, "continuously compounded rate");
  convert->add_option("--out", conv.out, "output CSV (default stdout)");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "write shipped markets or synthetic history");
  generate->add_option("what", gen.what, "base, contango, uk or history")
      ->required()
      ->check(CLI::IsMember({"base", "contango", "uk", "history"}));
  generate->add_option("--out", gen.out, "output directory");
  generate->add_option("--seed", gen.seed, "seed");
  generate->add_option("--plants", gen.plants, "history: number of plants");
  generate->add_option("--samples", gen.samples, "history: samples per plant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 4;  // help and version stay 0
  }

  try {
    if (*solve) return cmd_solve(run);
    if (*sweep) return cmd_sweep(run);
    if (*calibrate) return cmd_calibrate(cal);
    if (*convert) return cmd_convert(conv);
    if (*generate) return cmd_generate(gen);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalidInput;
  }
  return 0;
}
