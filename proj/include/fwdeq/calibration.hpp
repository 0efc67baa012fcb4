#pragma once

#include "fwdeq/model.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fwdeq {

class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Historical half-hourly data for one plant with the aligned spot prices of
/// electricity, the plant's fuel and emission certificates.
struct PlantHistory {
  std::string plant;
  Vector production;  // MWh
  Vector capacity;    // available MWh
  Vector electricity;
  Vector fuel;
  Vector emission;
};

struct NormalizedHistory {
  Vector load;  // production / capacity in [0, 1]
  Vector electricity;
  Vector fuel;
  Vector emission;
  std::size_t dropped = 0;  // samples with zero capacity
  std::size_t clamped = 0;  // samples with production above capacity (or below zero)

  std::size_t size() const { return static_cast<std::size_t>(load.size()); }
};

/// Throws CalibrationError when no sample has positive capacity or the
/// series lengths differ.
NormalizedHistory normalize_production(const PlantHistory& history);

/// Theta = Pi - c G - g G_em - c~. Production pays off iff Theta >= 0.
double margin(double c, double g, double offset, double electricity, double fuel,
              double emission);

/// Parameters in the order (c, g, c~).
using PlantParams = std::array<double, 3>;

struct FitOptions {
  PlantParams lower{0.0, 0.0, 0.0};
  PlantParams upper{10.0, 5.0, 100.0};
  double temperature = 1.0;  // logistic(Theta / temperature)
  int max_iterations = 200;
  std::size_t min_samples = 100;
};

/// sum_j (load_j - logistic(Theta_j / temperature))^2
double fit_objective(const NormalizedHistory& h, const PlantParams& p, double temperature = 1.0);
PlantParams fit_gradient(const NormalizedHistory& h, const PlantParams& p,
                         double temperature = 1.0);

struct PlantCalibration {
  std::string plant;
  double efficiency = 0.0;
  double emission_intensity = 0.0;
  double margin_offset = 0.0;
  double sse = 0.0;
  int iterations = 0;
  std::size_t samples = 0;
  bool converged = false;
  bool identifiable = true;  // Jacobian has full column rank at the fit
  bool degenerate = false;   // every fitted prediction saturated at 0 or 1

  PlantParams params() const { return {efficiency, emission_intensity, margin_offset}; }
};

/// Bounded Levenberg-Marquardt from the eight corners of a coarse grid inside
/// the bounds; keeps the lowest objective. Throws CalibrationError below
/// `min_samples` usable samples.
PlantCalibration fit_plant(const PlantHistory& history, const FitOptions& options = {});

struct ShrinkageEstimate {
  Matrix covariance;
  double intensity = 0.0;  // weight on the diagonal target
};

/// Sample covariance of the rows of `samples`, shrunk towards its diagonal
/// with the Schafer-Strimmer intensity. Needs at least two rows.
ShrinkageEstimate shrinkage_covariance(const Matrix& samples);

/// Shrinkage estimate of stacked discounted [Pi | G | G_em] samples for a
/// grid with `contracts` contracts and `fuels` fuels.
CovarianceModel shrinkage_covariance_model(const Matrix& samples, std::size_t contracts,
                                           std::size_t fuels);

struct SyntheticPlant {
  PlantParams truth;
  double noise = 0.02;
  std::size_t samples = 5000;
  double capacity = 100.0;
};

/// Synthetic history whose electricity price hovers around the plant's
/// marginal cost while fuel and emission prices vary independently, so all
/// three parameters are identified.
PlantHistory synthetic_history(const SyntheticPlant& plant, std::mt19937_64& rng);

}  // namespace fwdeq
