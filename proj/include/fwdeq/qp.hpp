#pragma once

#include "fwdeq/model.hpp"

#include <string>
#include <vector>

namespace fwdeq {

/// max  -pi^T x - 1/2 x^T Q x   s.t.  A x = a,  B x <= b,
/// with the multipliers of the rows listed in `pinned_duals` fixed to zero.
///
/// Multiplier sign convention: Q x + pi + A^T mu + B^T eta = 0, eta >= 0.
struct QpProblem {
  SparseMatrix Q;
  Vector pi;
  SparseMatrix A;
  Vector a;
  SparseMatrix B;
  Vector b;
  std::vector<std::size_t> pinned_duals;

  Eigen::Index dim() const { return pi.size(); }
  /// Throws std::invalid_argument on inconsistent dimensions.
  void check() const;
  double objective(const Vector& x) const;
};

struct KktReport {
  double stationarity = 0.0;     // ||Q x + pi + A^T mu + B^T eta||_inf
  double complementarity = 0.0;  // max |eta_i (B x - b)_i|
  double primal_eq = 0.0;        // ||A x - a||_inf
  double primal_ineq = 0.0;      // max(B x - b, 0)
  double dual_feas = 0.0;        // min(eta), reported raw
  double pinned = 0.0;           // ||mu_M||_inf

  /// Largest violation across all conditions (a negative dual_feas counts).
  double worst() const;
  bool passes(double tol) const { return worst() <= tol; }
};

enum class QpStatus { optimal, infeasible, max_iter };

std::string to_string(QpStatus status);

struct QpSolution {
  Vector x;
  Vector eq_duals;    // mu, full length rows(A); pinned entries are exactly zero
  Vector ineq_duals;  // eta
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
  bool polished = false;
  double objective = 0.0;
  KktReport kkt;
};

struct QpOptions {
  double tolerance = 1e-8;       // relative to 1 + ||b||_inf + ||pi||_inf
  int max_iterations = 200;
  double regularization = 1e-9;  // times max(1, ||Q||_max), factorization only
  int refinement_steps = 3;
  bool polish = true;
};

/// Primal-dual interior point (Mehrotra predictor-corrector) on the KKT system
/// of the problem with the pinned multiplier columns eliminated. The returned
/// report is computed against the original, unregularized problem.
QpSolution solve_dual_form(const QpProblem& problem, const QpOptions& options = {});

KktReport kkt_residuals(const QpProblem& problem, const Vector& x, const Vector& mu,
                        const Vector& eta);

/// Tolerance scale used by the solver: 1 + ||b||_inf + ||pi||_inf.
double residual_scale(const QpProblem& problem);

struct Phase1Result {
  Vector point;
  double margin = 0.0;  // max(B x - b); strictly feasible iff negative
  bool strictly_feasible() const { return margin < 0.0; }
};

class InconsistentEqualities : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Minimizes the largest inequality violation subject to A x = a.
/// Throws InconsistentEqualities when A x = a has no solution.
Phase1Result phase1_feasible(const SparseMatrix& A, const Vector& a, const SparseMatrix& B,
                             const Vector& b);

}  // namespace fwdeq
