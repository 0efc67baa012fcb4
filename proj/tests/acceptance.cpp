// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include "oracles.hpp"

#include "fwdeq/assembly.hpp"
#include "fwdeq/calibration.hpp"
#include "fwdeq/equilibrium.hpp"
#include "fwdeq/extensions.hpp"
#include "fwdeq/qp.hpp"
#include "fwdeq/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace fwdeq;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& id, const std::function<Outcome()>& body) {
  Outcome out;
  const auto t0 = Clock::now();
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  if (!out.pass) ++failures;
  std::printf("criterion %-3s %s  %s (%.1fs)\n", id.c_str(), out.pass ? "PASS" : "FAIL",
              out.detail.c_str(), seconds_since(t0));
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

SparseMatrix sparse(const Matrix& m) { return m.sparseView(0.0, 0.0); }

// Worst per-player KKT residual, Nash gap and clearing residual of one solve.
struct EquilibriumCheck {
  double kkt = 0.0;
  double nash = 0.0;  // max relative gap
  double clearing = 0.0;
  double clearing_limit = 0.0;
  bool nash_pass = false;
};

EquilibriumCheck check_equilibrium(const MarketInstance& m, const EquilibriumSolution& sol,
                                   double nash_tol) {
  EquilibriumCheck c;
  for (std::size_t k = 0; k < sol.players(); ++k) c.kkt = std::max(c.kkt, player_kkt(m, sol, k).worst());
  const auto nash = verify_nash(m, sol, nash_tol);
  c.nash = nash.max_gap;
  c.nash_pass = nash.pass;
  c.clearing = sol.clearing_residual;
  c.clearing_limit = 1e-8 * (1.0 + m.curves.demand.sum());
  return c;
}

MarketInstance with_risk(MarketInstance m, double producer, double consumer) {
  for (auto& p : m.producers) p.risk_aversion = producer;
  for (auto& c : m.consumers) c.risk_aversion = consumer;
  return m;
}

// Total long volume per contract of delivery 0, summed over players.
Vector long_volume(const MarketInstance& m, const EquilibriumSolution& sol) {
  const auto n = static_cast<Eigen::Index>(m.grid.ladder_size(0));
  Vector v = Vector::Zero(n);
  for (const auto& pos : sol.positions) v += pos.v.head(n).cwiseMax(0.0);
  return v;
}

// ---- 1 to 3: random markets -------------------------------------------------

struct RandomMarketResults {
  double kkt = 0.0, nash = 0.0, clearing_ratio = 0.0, curvature = 1.0;
  double solve_seconds = 0.0;
  bool nash_pass = true;
};

const RandomMarketResults& random_markets() {
  static const RandomMarketResults r = [] {
    RandomMarketResults out;
    std::mt19937_64 rng(20240601);
    std::vector<MarketInstance> markets;
    for (int i = 0; i < 50; ++i) markets.push_back(oracle::random_market(rng));
    std::vector<EquilibriumSolution> sols;
    const auto t0 = Clock::now();
    for (const auto& m : markets) {
      sols.push_back(solve_equilibrium(m));
      const auto c = check_equilibrium(m, sols.back(), 1e-6);
      out.kkt = std::max(out.kkt, c.kkt);
      out.nash = std::max(out.nash, c.nash);
      out.nash_pass = out.nash_pass && c.nash_pass;
      out.clearing_ratio = std::max(out.clearing_ratio, c.clearing / c.clearing_limit);
    }
    out.solve_seconds = seconds_since(t0);
    for (std::size_t i = 0; i < sols.size(); ++i) {
      out.curvature = std::min(out.curvature, min_clearing_curvature(sols[i].qp, 1000, 77 + i));
    }
    return out;
  }();
  return r;
}

Outcome criterion_1() {
  const auto& r = random_markets();
  const bool ok = r.kkt <= 1e-7 && r.solve_seconds < 30.0;
  return {ok, fmt("max player KKT %.3g", r.kkt) + fmt(", 50 solves and checks in %.2fs", r.solve_seconds)};
}

Outcome criterion_2() {
  const auto& r = random_markets();
  const bool ok = r.nash_pass && r.nash <= 1e-6 && r.clearing_ratio <= 1.0;
  return {ok, fmt("max relative Nash gap %.3g", r.nash) +
                  fmt(", max clearing residual / 1e-8(1+sum D) %.3g", r.clearing_ratio)};
}

Outcome criterion_3() {
  const auto& r = random_markets();
  return {r.curvature >= -1e-10, fmt("min x'Qx / (|x|^2 |Q|) over 50x1000 samples %.3g", r.curvature)};
}

// ---- 4: solver oracle -------------------------------------------------------

Outcome criterion_4() {
  std::mt19937_64 rng(4242);
  double worst = 0.0;
  int missing = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 7;  // up to 8 variables
    const int me = trial % 3 == 0 ? 0 : std::min(n - 1, 1 + trial % 2);
    const int mi = 1 + trial % 6;  // up to 6 inequalities
    const auto d = oracle::random_strictly_convex_qp(rng, n, me, mi);
    const auto ref = oracle::brute_force_qp(d);
    QpProblem p;
    p.Q = sparse(d.Q);
    p.pi = d.pi;
    p.A = sparse(d.A);
    p.a = d.a;
    p.B = sparse(d.B);
    p.b = d.b;
    const auto s = solve_dual_form(p, {1e-10});
    if (!ref || s.status != QpStatus::optimal) {
      ++missing;
      continue;
    }
    worst = std::max(worst, (s.x - ref->x).cwiseAbs().maxCoeff());
  }
  return {missing == 0 && worst <= 1e-7,
          fmt("max |x - x_enum| %.3g over 100 QPs", worst) + fmt(", unsolved %g", missing)};
}

// ---- 5 and 6: term structure -----------------------------------------------

Outcome criterion_5() {
  const auto base = base_market();
  std::vector<Vector> ladders;
  bool ok = true;
  std::ostringstream detail;
  for (double lambda : {1e-6, 1e-5, 1e-4}) {
    const auto sol = solve_equilibrium(with_risk(base, lambda, lambda));
    const auto n = static_cast<Eigen::Index>(base.grid.ladder_size(0));
    const Vector p = sol.prices.head(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) ok = ok && p[i + 1] >= p[i] - 1e-9;
    if (!ladders.empty()) {
      ok = ok && ((p - ladders.back()).array() >= -1e-9).all();
    }
    ladders.push_back(p);
    detail << "lambda " << lambda << ": " << fmt("%.4f", p[0]) << " -> " << fmt("%.4f", p[n - 1]) << "; ";
  }
  return {ok, detail.str()};
}

Outcome criterion_6() {
  const auto m = contango_market();
  const auto n = static_cast<Eigen::Index>(m.grid.ladder_size(0));
  std::vector<double> slopes;
  std::ostringstream detail;
  detail << "lambda_p 1e-6, slope by lambda_c:";
  for (double lc : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2}) {
    const auto sol = solve_equilibrium(with_risk(m, 1e-6, lc));
    slopes.push_back(sol.prices[n - 1] - sol.prices[0]);
    detail << ' ' << lc << ':' << fmt("%+.3g", slopes.back());
  }
  bool flip = false;
  for (std::size_t i = 0; i + 1 < slopes.size(); ++i) flip = flip || (slopes[i] > 0.0 && slopes[i + 1] < 0.0);
  return {flip, detail.str() + " (contango market)"};
}

// ---- 7: liquidity ----------------------------------------------------------

Outcome criterion_7a() {
  auto m = base_market();
  apply_override(m, "upsilon", 1e-2);
  const auto v = long_volume(m, solve_equilibrium(m));
  const double dispersion = (v.array() - v.mean()).abs().maxCoeff();
  return {dispersion <= 0.05 * v.mean(),
          fmt("upsilon 1e-2: max |V_t - mean| %.4g", dispersion) + fmt(" vs mean %.4g", v.mean())};
}

PowerPlant gas_plant(const std::string& id, double cap, double c, double g) {
  PowerPlant p;
  p.id = id;
  p.fuel = "gas";
  p.capacity_max = cap;
  p.ramp_up = cap;
  p.ramp_down = -cap;
  p.efficiency = c;
  p.emission_intensity = g;
  return p;
}

// Five trading times, one producer and one consumer; at zero costs each
// trades on one side only.
MarketInstance one_sided_market() {
  MarketInstance m;
  m.grid = ContractGrid::build({1.0}, {{0.2, 0.4, 0.6, 0.8, 1.0}});
  m.fuels = {"gas"};
  m.producers.push_back({"P", 1e-3, {gas_plant("a", 100.0, 0.5, 0.4), gas_plant("b", 80.0, 0.7, 0.3)}});
  m.consumers.push_back({"C", 1e-3, 1.0, 0.0});
  oracle::fill_flat(m, 20.0, 5.0, 60.0, 1.0);
  std::mt19937_64 rng(11);
  m.covariance = CovarianceModel(oracle::random_spd(rng, 15, 0.5, 4.0), 5);
  m.trade_bound = 1000.0;
  return m;
}

struct EpsilonEffect {
  double dv = 0.0;
  double min_rise = 0.0;
  bool one_sided = true;
};

EpsilonEffect epsilon_effect(const MarketInstance& base, double eps) {
  EquilibriumOptions o;
  o.qp.tolerance = 1e-12;
  const auto ref = solve_equilibrium(base, o);
  auto m = base;
  apply_override(m, "epsilon", eps);
  const auto sol = solve_equilibrium(m, o);
  const auto n = static_cast<Eigen::Index>(base.grid.size());
  EpsilonEffect e;
  for (std::size_t k = 0; k < sol.players(); ++k) {
    const Vector v = ref.positions[k].v.head(n);
    e.one_sided = e.one_sided && !(v.maxCoeff() > 1e-6 && v.minCoeff() < -1e-6);
    e.dv = std::max(e.dv, (sol.positions[k].v.head(n) - v).cwiseAbs().maxCoeff());
  }
  e.min_rise = (sol.prices - ref.prices).minCoeff();
  return e;
}

Outcome criterion_7b() {
  const auto e = epsilon_effect(one_sided_market(), 0.5);
  const auto b = epsilon_effect(base_market(), 0.5);
  const bool ok = e.one_sided && e.dv <= 1e-6 && e.min_rise > 0.0;
  return {ok, fmt("epsilon 0.5 on a one-sided market: max |dV| %.3g", e.dv) +
                  fmt(", min price rise %.4g", e.min_rise) +
                  fmt("; base market has two-sided players, |dV| %.4g", b.dv)};
}

Outcome criterion_7c() {
  auto m = base_market();
  apply_override(m, "epsilon_first", 100.0);
  const auto sol = solve_equilibrium(m);
  const auto n = static_cast<Eigen::Index>(m.grid.size());
  double first = 0.0, total = 0.0;
  for (const auto& pos : sol.positions) {
    first += std::abs(pos.v[0]);
    total += pos.v.head(n).cwiseAbs().sum();
  }
  return {first <= 1e-6 * total, fmt("epsilon_11 100: sum |V(t1)| %.3g", first) + fmt(", total %.4g", total)};
}

// ---- 8: fuel shift ---------------------------------------------------------

Outcome criterion_8() {
  const auto base = base_market();
  auto shifted = [&](double s) {
    auto m = base;
    apply_override(m, "fuel_shift:gas", s);
    return solve_equilibrium(m).prices;
  };
  const Vector down = shifted(-0.1), mid = shifted(0.0), up = shifted(0.1);
  const bool ok = ((up - mid).array() > 0.0).all() && ((mid - down).array() > 0.0).all();
  return {ok, fmt("mean ladder %.3f", down.mean()) + fmt(" / %.3f", mid.mean()) +
                  fmt(" / %.3f at gas -10%% / 0 / +10%%", up.mean())};
}

// ---- 9: calibration --------------------------------------------------------

Outcome criterion_9() {
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> c(0.4, 2.0), g(0.2, 1.2), off(5.0, 40.0);
  int good = 0;
  for (int k = 0; k < 20; ++k) {
    const PlantParams truth{c(rng), g(rng), off(rng)};
    const auto p = fit_plant(synthetic_history({truth, 0.02, 5000}, rng)).params();
    bool ok = true;
    for (int i = 0; i < 3; ++i) ok = ok && std::abs(p[i] - truth[i]) <= 0.05 * std::abs(truth[i]);
    good += ok;
  }

  // Central differences against the analytic gradient.
  const auto h = normalize_production(synthetic_history({{0.8, 0.5, 12.0}, 0.02, 5000}, rng));
  double worst = 0.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const PlantParams p{0.5 + 0.6 * u(rng), 0.3 + 0.4 * u(rng), 8.0 + 8.0 * u(rng)};
    const auto grad = fit_gradient(h, p);
    for (int i = 0; i < 3; ++i) {
      const double step = 1e-5 * std::max(1.0, std::abs(p[i]));
      auto hi = p, lo = p;
      hi[i] += step;
      lo[i] -= step;
      const double fd = (fit_objective(h, hi) - fit_objective(h, lo)) / (2.0 * step);
      worst = std::max(worst, std::abs(grad[i] - fd) / std::max(std::abs(fd), 1e-3 * h.load.size()));
    }
  }
  return {good >= 18 && worst <= 1e-4,
          fmt("%g of 20 plants within 5%%", good) + fmt(", gradient vs FD rel err %.3g", worst)};
}

// ---- 10: futures conversion ------------------------------------------------

Outcome criterion_10() {
  std::mt19937_64 rng(1010);
  std::uniform_real_distribution<double> price(-50.0, 150.0), dt(0.01, 1.0), rate(0.0, 0.2);
  double literal = 0.0, terminal = 0.0, telescope = 0.0, roundtrip = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 1 + rng() % 12;
    std::vector<double> times(len), fut(len);
    double at = 0.0;
    for (auto& t : times) t = (at += dt(rng));
    for (auto& f : fut) f = price(rng);
    const double r = rate(rng);

    const auto fwd = forwards_from_futures(fut, times, r);
    const auto ref = oracle::forwards_literal(fut, times, times.back(), r);
    for (std::size_t i = 0; i < len; ++i) {
      literal = std::max(literal, std::abs(fwd[i] - ref[i]) / (1.0 + std::abs(ref[i])));
    }
    terminal = std::max(terminal, std::abs(fwd.back() - fut.back()));

    for (double f : forwards_from_futures(fut, times, 0.0)) {
      telescope = std::max(telescope, std::abs(f - fut.back()) / (1.0 + std::abs(fut.back())));
    }

    const auto back = forwards_from_futures(futures_from_forwards(fwd, times, r), times, r);
    for (std::size_t i = 0; i < len; ++i) {
      roundtrip = std::max(roundtrip, std::abs(back[i] - fwd[i]) / (1.0 + std::abs(fwd[i])));
    }
  }
  const bool ok = literal <= 1e-12 && terminal == 0.0 && telescope <= 1e-12 && roundtrip <= 1e-12;
  return {ok, fmt("literal %.2g", literal) + fmt(", terminal %.2g", terminal) +
                  fmt(", r=0 telescoping %.2g", telescope) + fmt(", roundtrip %.2g", roundtrip)};
}

// ---- 11: scale -------------------------------------------------------------

Outcome criterion_11() {
  const auto m = uk_scale_market();
  std::size_t plants = 0;
  for (const auto& p : m.producers) plants += p.plants.size();
  EquilibriumOptions o;
  o.check_feasibility = false;
  o.qp.tolerance = 1e-13;
  const auto t0 = Clock::now();
  const auto sol = solve_equilibrium(m, o);
  const double solve = seconds_since(t0);
  const auto c = check_equilibrium(m, sol, 1e-6);
  const double curvature = min_clearing_curvature(sol.qp, 1000, 11);
  const bool ok = solve < 600.0 && c.kkt <= 1e-6 && c.nash <= 1e-6 && c.nash_pass &&
                  c.clearing <= c.clearing_limit && curvature >= -1e-10;
  return {ok, fmt("%g plants", static_cast<double>(plants)) +
                  fmt(", %g contracts", static_cast<double>(m.grid.size())) + fmt(", solve %.0fs", solve) +
                  fmt(", KKT %.3g", c.kkt) + fmt(", Nash %.3g", c.nash) +
                  fmt(", clearing %.3g", c.clearing) + fmt(", curvature %.3g", curvature)};
}

}  // namespace

int main() {
  report("1", criterion_1);
  report("2", criterion_2);
  report("3", criterion_3);
  report("4", criterion_4);
  report("5", criterion_5);
  report("6", criterion_6);
  report("7a", criterion_7a);
  report("7b", criterion_7b);
  report("7c", criterion_7c);
  report("8", criterion_8);
  report("9", criterion_9);
  report("10", criterion_10);
  report("11", criterion_11);
  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
