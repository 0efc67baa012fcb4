#include "fwdeq/calibration.hpp"

#include <ceres/ceres.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace fwdeq {

namespace {

double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// residual r_j = load_j - logistic(Theta_j / tau) and its derivative in
// (c, g, c~)
struct Residual {
  double r;
  double dc, dg, doff;
};

Residual residual(const NormalizedHistory& h, Eigen::Index j, const double* p, double tau) {
  const double theta = margin(p[0], p[1], p[2], h.electricity[j], h.fuel[j], h.emission[j]);
  const double s = logistic(theta / tau);
  const double ds = s * (1.0 - s) / tau;  // d logistic / d Theta
  return {h.load[j] - s, ds * h.fuel[j], ds * h.emission[j], ds};
}

class LogisticCost : public ceres::CostFunction {
 public:
  LogisticCost(const NormalizedHistory& h, double tau) : h_(h), tau_(tau) {
    set_num_residuals(static_cast<int>(h.size()));
    mutable_parameter_block_sizes()->push_back(3);
  }

  bool Evaluate(double const* const* params, double* residuals, double** jacobians) const override {
    const double* p = params[0];
    for (Eigen::Index j = 0; j < h_.load.size(); ++j) {
      const auto r = residual(h_, j, p, tau_);
      residuals[j] = r.r;
      if (jacobians && jacobians[0]) {
        double* row = jacobians[0] + 3 * j;
        row[0] = r.dc;
        row[1] = r.dg;
        row[2] = r.doff;
      }
    }
    return true;
  }

 private:
  const NormalizedHistory& h_;
  double tau_;
};

PlantParams clamp_to(const PlantParams& p, const FitOptions& o) {
  PlantParams out;
  for (int i = 0; i < 3; ++i) out[i] = std::clamp(p[i], o.lower[i], o.upper[i]);
  return out;
}

// Linear regression of Pi - logit(load) on (G, G_em, 1) over samples that
// are not saturated. Gives a start near the basin when data is informative.
PlantParams regression_start(const NormalizedHistory& h, const FitOptions& o) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index j = 0; j < h.load.size(); ++j) {
    if (h.load[j] > 0.02 && h.load[j] < 0.98) rows.push_back(j);
  }
  if (rows.size() < 3) return clamp_to({0.0, 0.0, 0.0}, o);
  Matrix x(static_cast<Eigen::Index>(rows.size()), 3);
  Vector y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto j = rows[i];
    const auto r = static_cast<Eigen::Index>(i);
    const double w = h.load[j];
    x.row(r) << h.fuel[j], h.emission[j], 1.0;
    y[r] = h.electricity[j] - o.temperature * std::log(w / (1.0 - w));
  }
  const Vector b = x.colPivHouseholderQr().solve(y);
  if (!b.allFinite()) return clamp_to({0.0, 0.0, 0.0}, o);
  return clamp_to({b[0], b[1], b[2]}, o);
}

}  // namespace

NormalizedHistory normalize_production(const PlantHistory& history) {
  const auto n = history.production.size();
  if (history.capacity.size() != n || history.electricity.size() != n || history.fuel.size() != n ||
      history.emission.size() != n) {
    throw CalibrationError("history series for plant '" + history.plant + "' differ in length");
  }
  NormalizedHistory out;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (history.capacity[j] > 0.0) {
      keep.push_back(j);
    } else {
      ++out.dropped;
    }
  }
  if (keep.empty()) {
    throw CalibrationError("plant '" + history.plant + "' has no sample with positive capacity");
  }
  const auto m = static_cast<Eigen::Index>(keep.size());
  out.load.resize(m);
  out.electricity.resize(m);
  out.fuel.resize(m);
  out.emission.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto j = keep[static_cast<std::size_t>(i)];
    const double w = history.production[j] / history.capacity[j];
    if (w > 1.0 || w < 0.0) ++out.clamped;
    out.load[i] = std::clamp(w, 0.0, 1.0);
    out.electricity[i] = history.electricity[j];
    out.fuel[i] = history.fuel[j];
    out.emission[i] = history.emission[j];
  }
  return out;
}

double margin(double c, double g, double offset, double electricity, double fuel,
              double emission) {
  return electricity - c * fuel - g * emission - offset;
}

double fit_objective(const NormalizedHistory& h, const PlantParams& p, double temperature) {
  double sse = 0.0;
  for (Eigen::Index j = 0; j < h.load.size(); ++j) {
    const double r = residual(h, j, p.data(), temperature).r;
    sse += r * r;
  }
  return sse;
}

PlantParams fit_gradient(const NormalizedHistory& h, const PlantParams& p, double temperature) {
  PlantParams g{0.0, 0.0, 0.0};
  for (Eigen::Index j = 0; j < h.load.size(); ++j) {
    const auto r = residual(h, j, p.data(), temperature);
    g[0] += 2.0 * r.r * r.dc;
    g[1] += 2.0 * r.r * r.dg;
    g[2] += 2.0 * r.r * r.doff;
  }
  return g;
}

PlantCalibration fit_plant(const PlantHistory& history, const FitOptions& options) {
  const auto h = normalize_production(history);
  if (h.size() < options.min_samples) {
    throw CalibrationError("plant '" + history.plant + "' has " + std::to_string(h.size()) +
                           " usable samples, need " + std::to_string(options.min_samples));
  }
  if (!(options.temperature > 0.0)) throw CalibrationError("temperature must be positive");

  std::vector<PlantParams> starts{regression_start(h, options)};
  for (int corner = 0; corner < 8; ++corner) {
    PlantParams s;
    for (int i = 0; i < 3; ++i) {
      const double frac = (corner >> i) & 1 ? 0.75 : 0.25;
      s[i] = options.lower[i] + frac * (options.upper[i] - options.lower[i]);
    }
    starts.push_back(s);
  }

  PlantCalibration best;
  best.plant = history.plant;
  best.samples = h.size();
  best.sse = std::numeric_limits<double>::infinity();
  for (const auto& start : starts) {
    PlantParams p = start;
    ceres::Problem problem;
    problem.AddResidualBlock(new LogisticCost(h, options.temperature), nullptr, p.data());
    for (int i = 0; i < 3; ++i) {
      problem.SetParameterLowerBound(p.data(), i, options.lower[i]);
      problem.SetParameterUpperBound(p.data(), i, options.upper[i]);
    }
    ceres::Solver::Options so;
    so.trust_region_strategy_type = ceres::LEVENBERG_MARQUARDT;
    so.linear_solver_type = ceres::DENSE_QR;
    so.max_num_iterations = options.max_iterations;
    so.function_tolerance = 1e-12;
    so.gradient_tolerance = 1e-12;
    so.parameter_tolerance = 1e-10;
    so.logging_type = ceres::SILENT;
    ceres::Solver::Summary summary;
    ceres::Solve(so, &problem, &summary);

    const double sse = fit_objective(h, p, options.temperature);
    if (sse < best.sse) {
      best.efficiency = p[0];
      best.emission_intensity = p[1];
      best.margin_offset = p[2];
      best.sse = sse;
      best.iterations = static_cast<int>(summary.iterations.size());
      best.converged = summary.termination_type == ceres::CONVERGENCE;
    }
  }

  // Identifiability from the Gauss-Newton matrix, degeneracy from saturation.
  const PlantParams p = best.params();
  Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
  std::size_t unsaturated = 0;
  for (Eigen::Index j = 0; j < h.load.size(); ++j) {
    const auto r = residual(h, j, p.data(), options.temperature);
    const Eigen::Vector3d row(r.dc, r.dg, r.doff);
    jtj += row * row.transpose();
    const double s = h.load[j] - r.r;
    if (s > 0.01 && s < 0.99) ++unsaturated;
  }
  const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(jtj).eigenvalues();
  best.identifiable = ev[2] > 0.0 && ev[0] > 1e-10 * ev[2];
  best.degenerate = unsaturated == 0;
  return best;
}

ShrinkageEstimate shrinkage_covariance(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < 2) throw CalibrationError("shrinkage covariance needs at least two samples");
  const Matrix centered = samples.rowwise() - samples.colwise().mean();
  const double nn = static_cast<double>(n);
  const Matrix w_bar = centered.transpose() * centered / nn;
  const Matrix s = w_bar * (nn / (nn - 1.0));

  // Var(s_ij) = n / (n - 1)^3 sum_k (w_kij - w_bar_ij)^2
  double var_sum = 0.0;
  double off_sq = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      if (i == j) continue;
      const Vector wk = centered.col(i).cwiseProduct(centered.col(j));
      var_sum += (wk.array() - w_bar(i, j)).square().sum();
      off_sq += s(i, j) * s(i, j);
    }
  }
  var_sum *= nn / std::pow(nn - 1.0, 3);

  ShrinkageEstimate out;
  out.intensity = off_sq > 0.0 ? std::clamp(var_sum / off_sq, 0.0, 1.0) : 1.0;
  out.covariance = (1.0 - out.intensity) * s;
  out.covariance.diagonal() = s.diagonal();
  out.covariance = Matrix(out.covariance.selfadjointView<Eigen::Upper>());
  return out;
}

CovarianceModel shrinkage_covariance_model(const Matrix& samples, std::size_t contracts,
                                           std::size_t fuels) {
  const auto dim = static_cast<Eigen::Index>(contracts * (fuels + 2));
  if (samples.cols() != dim) {
    throw ModelError("price samples have " + std::to_string(samples.cols()) +
                     " columns, the grid needs " + std::to_string(dim));
  }
  return CovarianceModel(shrinkage_covariance(samples).covariance, contracts);
}

PlantHistory synthetic_history(const SyntheticPlant& plant, std::mt19937_64& rng) {
  const auto n = static_cast<Eigen::Index>(plant.samples);
  std::uniform_real_distribution<double> fuel(15.0, 35.0);
  std::uniform_real_distribution<double> emission(5.0, 25.0);
  std::normal_distribution<double> spread(0.0, 4.0);
  std::normal_distribution<double> noise(0.0, plant.noise);
  const auto& [c, g, offset] = plant.truth;

  PlantHistory h;
  h.plant = "synthetic";
  h.production.resize(n);
  h.capacity = Vector::Constant(n, plant.capacity);
  h.electricity.resize(n);
  h.fuel.resize(n);
  h.emission.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    h.fuel[j] = fuel(rng);
    h.emission[j] = emission(rng);
    h.electricity[j] = c * h.fuel[j] + g * h.emission[j] + offset + spread(rng);
    const double theta = margin(c, g, offset, h.electricity[j], h.fuel[j], h.emission[j]);
    h.production[j] = plant.capacity * (logistic(theta) + noise(rng));
  }
  return h;
}

}  // namespace fwdeq
