#include "fwdeq/qp.hpp"

#include <Eigen/OrderingMethods>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fwdeq {

namespace {

using Index = Eigen::Index;
using LdltSolver = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

double inf_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

double max_abs(const SparseMatrix& m) {
  double r = 0.0;
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) r = std::max(r, std::abs(it.value()));
  }
  return r;
}

struct RowEntries {
  std::vector<std::vector<std::pair<int, double>>> rows;
};

RowEntries row_entries(const SparseMatrix& m) {
  RowEntries r;
  r.rows.resize(static_cast<std::size_t>(m.rows()));
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
      r.rows[static_cast<std::size_t>(it.row())].emplace_back(static_cast<int>(it.col()),
                                                              it.value());
    }
  }
  return r;
}

/// Symmetric factorization with a pattern analysed once and reused.
class PatternLdlt {
 public:
  bool factor(const SparseMatrix& lower) {
    if (!analyzed_ || lower.nonZeros() != nnz_) {
      ldlt_.analyzePattern(lower);
      analyzed_ = true;
      nnz_ = lower.nonZeros();
    }
    ldlt_.factorize(lower);
    return ldlt_.info() == Eigen::Success;
  }
  Vector solve(const Vector& rhs) const { return ldlt_.solve(rhs); }

 private:
  LdltSolver ldlt_;
  bool analyzed_ = false;
  Index nnz_ = -1;
};

/// Solves E u = r in the least-squares sense through the regularized
/// augmented system [[I, E], [E^T, -delta I]], refining against the
/// unregularized problem. Exact for consistent systems of full column rank.
class AugmentedLeastSquares {
 public:
  explicit AugmentedLeastSquares(double delta) : delta_(delta) {}
  void set_delta(double delta) { delta_ = delta; }

  bool factor(const SparseMatrix& e) {
    e_ = &e;
    const Index rows = e.rows();
    const Index cols = e.cols();
    std::vector<Triplet> t;
    t.reserve(static_cast<std::size_t>(rows + cols + e.nonZeros()));
    for (Index i = 0; i < rows; ++i) t.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
    for (int k = 0; k < e.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(e, k); it; ++it) {
        t.emplace_back(static_cast<int>(rows + it.col()), static_cast<int>(it.row()), it.value());
      }
    }
    for (Index j = 0; j < cols; ++j) {
      t.emplace_back(static_cast<int>(rows + j), static_cast<int>(rows + j), -delta_);
    }
    SparseMatrix m(rows + cols, rows + cols);
    m.setFromTriplets(t.begin(), t.end());
    return ldlt_.factor(m);
  }

  Vector solve(const Vector& r, int refine) const {
    const Index rows = e_->rows();
    const Index cols = e_->cols();
    Vector u = Vector::Zero(cols);
    Vector res = r;
    double best = inf_norm(res);
    for (int step = 0; step <= refine; ++step) {
      Vector rhs = Vector::Zero(rows + cols);
      rhs.head(rows) = res;
      const Vector sol = ldlt_.solve(rhs);
      Vector trial = u + sol.tail(cols);
      Vector trial_res = r - (*e_) * trial;
      const double norm = inf_norm(trial_res);
      if (!(norm < best) && step > 0) break;
      u = std::move(trial);
      res = std::move(trial_res);
      best = norm;
      if (best == 0.0) break;
    }
    return u;
  }

 private:
  double delta_;
  const SparseMatrix* e_ = nullptr;
  PatternLdlt ldlt_;
};

/// Newton system of the interior point method:
///   (Q + B^T diag(theta) B) dx + A_f^T dmu_f = r1
///   A dx = r2            (every row of A, pinned rows included)
class NewtonSystem {
 public:
  NewtonSystem(const QpProblem& p, double delta)
      : p_(p), delta_(delta), b_rows_(row_entries(p.B)), ls_(delta) {
    n_ = p.dim();
    m_ = p.A.rows();
    std::vector<char> pinned(static_cast<std::size_t>(m_), 0);
    for (auto r : p.pinned_duals) pinned[r] = 1;
    free_index_.assign(static_cast<std::size_t>(m_), -1);
    for (Index r = 0; r < m_; ++r) {
      if (!pinned[static_cast<std::size_t>(r)]) {
        free_index_[static_cast<std::size_t>(r)] = static_cast<int>(free_rows_.size());
        free_rows_.push_back(static_cast<int>(r));
      }
    }
    least_squares_ = !p.pinned_duals.empty() && !pinned_rows_implied(p);
    for (int k = 0; k < p.Q.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(p.Q, k); it; ++it) {
        q_entries_.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      }
    }
    for (int k = 0; k < p.A.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(p.A, k); it; ++it) {
        a_entries_.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      }
    }
    if (!least_squares_) {
      std::vector<Triplet> t;
      for (const auto& e : a_entries_) {
        const int f = free_index_[static_cast<std::size_t>(e.row())];
        if (f >= 0) t.emplace_back(f, e.col(), e.value());
      }
      af_.resize(free_count(), n_);
      af_.setFromTriplets(t.begin(), t.end());
    }
  }

  Index free_count() const { return static_cast<Index>(free_rows_.size()); }

  /// Retries with a larger diagonal regularization when a pivot vanishes.
  bool factor(const Vector& theta) {
    theta_ = theta;
    for (int attempt = 0; attempt < 8; ++attempt) {
      if (factor_with(delta_ * std::pow(100.0, attempt))) return true;
    }
    return false;
  }

 private:
  bool factor_with(double delta) {
    std::vector<Triplet> t;
    t.reserve(q_entries_.size() + a_entries_.size() * 2 + static_cast<std::size_t>(n_ + m_));
    if (!least_squares_) {
      // Q is indefinite on the price slice, so static pivoting is unsafe;
      // use a pivoting LU on the full matrix.
      for (const auto& e : q_entries_) t.push_back(e);
      for (Index i = 0; i < n_; ++i) t.emplace_back(static_cast<int>(i), static_cast<int>(i), delta);
      add_btb(t, false);
      for (const auto& e : a_entries_) {
        const int f = free_index_[static_cast<std::size_t>(e.row())];
        if (f < 0) continue;
        t.emplace_back(static_cast<int>(n_ + f), e.col(), e.value());
        t.emplace_back(e.col(), static_cast<int>(n_ + f), e.value());
      }
      const Index mf = free_count();
      for (Index r = 0; r < mf; ++r) {
        t.emplace_back(static_cast<int>(n_ + r), static_cast<int>(n_ + r), -delta);
      }
      SparseMatrix m(n_ + mf, n_ + mf);
      m.setFromTriplets(t.begin(), t.end());
      m.makeCompressed();
      if (!lu_analyzed_ || m.nonZeros() != lu_nnz_) {
        lu_.analyzePattern(m);
        lu_analyzed_ = true;
        lu_nnz_ = m.nonZeros();
      }
      lu_.factorize(m);
      return lu_.info() == Eigen::Success;
    }
    // Overdetermined: rows [stationarity (n); A (m)], columns [dx (n); dmu_f].
    for (const auto& e : q_entries_) t.push_back(e);
    add_btb(t, false);
    for (const auto& e : a_entries_) {
      const int f = free_index_[static_cast<std::size_t>(e.row())];
      if (f >= 0) t.emplace_back(e.col(), static_cast<int>(n_ + f), e.value());
      t.emplace_back(static_cast<int>(n_ + e.row()), e.col(), e.value());
    }
    e_.resize(n_ + m_, n_ + free_count());
    e_.setFromTriplets(t.begin(), t.end());
    ls_.set_delta(delta);
    return ls_.factor(e_);
  }

 public:
  /// Returns dx and the full-length dmu (pinned entries zero).
  void solve(const Vector& r1, const Vector& r2, int refine, Vector& dx, Vector& dmu) const {
    Vector rhs(n_ + m_);
    rhs << r1, r2;
    dmu = Vector::Zero(m_);
    if (least_squares_) {
      const Vector u = ls_.solve(rhs, refine);
      dx = u.head(n_);
      for (std::size_t f = 0; f < free_rows_.size(); ++f) {
        dmu[free_rows_[f]] = u[n_ + static_cast<Index>(f)];
      }
      return;
    }
    // Pinned rows are implied by stationarity rows here, so they are dropped.
    const Index mf = free_count();
    Vector sq(n_ + mf);
    sq.head(n_) = r1;
    for (Index f = 0; f < mf; ++f) sq[n_ + f] = r2[free_rows_[static_cast<std::size_t>(f)]];
    Vector u = Vector::Zero(n_ + mf);
    Vector res = sq;
    double best = inf_norm(res);
    for (int step = 0; step <= refine; ++step) {
      Vector trial = u + Vector(lu_.solve(res));
      Vector trial_res = sq - apply_square(trial);
      const double norm = inf_norm(trial_res);
      if (!(norm < best) && step > 0) break;
      u = std::move(trial);
      res = std::move(trial_res);
      best = norm;
      if (best == 0.0) break;
    }
    dx = u.head(n_);
    for (Index f = 0; f < mf; ++f) dmu[free_rows_[static_cast<std::size_t>(f)]] = u[n_ + f];
  }

 private:
  void add_btb(std::vector<Triplet>& t, bool lower_only) const {
    for (std::size_t r = 0; r < b_rows_.rows.size(); ++r) {
      const auto& row = b_rows_.rows[r];
      const double w = theta_[static_cast<Index>(r)];
      for (const auto& [ca, va] : row) {
        for (const auto& [cb, vb] : row) {
          if (lower_only && ca < cb) continue;
          t.emplace_back(ca, cb, w * va * vb);
        }
      }
    }
  }

  Vector apply_square(const Vector& u) const {
    const Index mf = free_count();
    const Vector x = u.head(n_);
    const Vector y = u.tail(mf);
    Vector out(n_ + mf);
    out.head(n_) = p_.Q * x + p_.B.transpose() * (theta_.cwiseProduct(p_.B * x)) +
                   af_.transpose() * y;
    out.tail(mf) = af_ * x;
    return out;
  }

  // Every pinned row r equals row j of Q for some variable j that appears in
  // no constraint and has pi_j = -a_r. Stationarity in x_j then is that row.
  static bool pinned_rows_implied(const QpProblem& p) {
    const SparseMatrix at = p.A.transpose();
    const Eigen::SparseMatrix<double, Eigen::RowMajor> qr = p.Q;
    std::vector<char> in_constraint(static_cast<std::size_t>(p.dim()), 0);
    for (int k = 0; k < p.A.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(p.A, k); it; ++it) in_constraint[static_cast<std::size_t>(it.col())] = 1;
    for (int k = 0; k < p.B.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(p.B, k); it; ++it) in_constraint[static_cast<std::size_t>(it.col())] = 1;

    auto same = [&](Index row, Index j) {
      SparseMatrix::InnerIterator a(at, static_cast<int>(row));
      Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator q(qr, static_cast<int>(j));
      for (;; ++a, ++q) {
        while (a && a.value() == 0.0) ++a;
        while (q && q.value() == 0.0) ++q;
        if (!a || !q) return !a && !q;
        if (a.index() != q.index() || a.value() != q.value()) return false;
      }
    };
    std::vector<char> used(static_cast<std::size_t>(p.dim()), 0);
    for (auto r : p.pinned_duals) {
      const auto row = static_cast<Index>(r);
      bool found = false;
      for (Index j = 0; j < p.dim() && !found; ++j) {
        if (used[static_cast<std::size_t>(j)] || in_constraint[static_cast<std::size_t>(j)]) continue;
        if (p.pi[j] != -p.a[row]) continue;
        if (same(row, j)) {
          used[static_cast<std::size_t>(j)] = 1;
          found = true;
        }
      }
      if (!found) return false;
    }
    return true;
  }

  const QpProblem& p_;
  double delta_;
  Index n_ = 0;
  Index m_ = 0;
  RowEntries b_rows_;
  std::vector<Triplet> q_entries_;
  std::vector<Triplet> a_entries_;
  std::vector<int> free_rows_;
  std::vector<int> free_index_;
  bool least_squares_ = false;
  Vector theta_;
  SparseMatrix e_;
  Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu_;
  bool lu_analyzed_ = false;
  Index lu_nnz_ = -1;
  AugmentedLeastSquares ls_;
  SparseMatrix af_;  // free rows of A
};

double step_to_boundary(const Vector& v, const Vector& dv) {
  double alpha = 1.0;
  for (Index i = 0; i < v.size(); ++i) {
    if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
  }
  return alpha;
}

/// Scaled worst residual used for convergence and polish acceptance.
double scaled_worst(const KktReport& r, double scale) { return r.worst() / scale; }

/// Active-set Newton correction from an interior point iterate: treat
/// constraints with eta_i >= slack_i as equalities and the rest as inactive,
/// then solve the resulting linear KKT system.
bool polish(const QpProblem& p, double delta, int refine, Vector& x, Vector& mu, Vector& eta,
            const Vector& slack) {
  const Index n = p.dim();
  const Index m = p.A.rows();
  std::vector<int> active;
  for (Index i = 0; i < eta.size(); ++i) {
    if (eta[i] >= slack[i]) active.push_back(static_cast<int>(i));
  }
  std::vector<char> pinned(static_cast<std::size_t>(m), 0);
  for (auto r : p.pinned_duals) pinned[r] = 1;
  std::vector<int> free_index(static_cast<std::size_t>(m), -1);
  std::vector<int> free_rows;
  for (Index r = 0; r < m; ++r) {
    if (!pinned[static_cast<std::size_t>(r)]) {
      free_index[static_cast<std::size_t>(r)] = static_cast<int>(free_rows.size());
      free_rows.push_back(static_cast<int>(r));
    }
  }
  const auto nf = static_cast<Index>(free_rows.size());
  const auto na = static_cast<Index>(active.size());

  std::vector<int> active_index(static_cast<std::size_t>(eta.size()), -1);
  for (Index k = 0; k < na; ++k) active_index[static_cast<std::size_t>(active[k])] = static_cast<int>(k);

  std::vector<Triplet> t;
  for (int k = 0; k < p.Q.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.Q, k); it; ++it) {
      t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    }
  }
  for (int k = 0; k < p.A.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.A, k); it; ++it) {
      const int f = free_index[static_cast<std::size_t>(it.row())];
      if (f >= 0) t.emplace_back(static_cast<int>(it.col()), static_cast<int>(n + f), it.value());
      t.emplace_back(static_cast<int>(n + it.row()), static_cast<int>(it.col()), it.value());
    }
  }
  for (int k = 0; k < p.B.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.B, k); it; ++it) {
      const int a = active_index[static_cast<std::size_t>(it.row())];
      if (a < 0) continue;
      t.emplace_back(static_cast<int>(it.col()), static_cast<int>(n + nf + a), it.value());
      t.emplace_back(static_cast<int>(n + m + a), static_cast<int>(it.col()), it.value());
    }
  }
  SparseMatrix e(n + m + na, n + nf + na);
  e.setFromTriplets(t.begin(), t.end());

  Vector eta_trial = Vector::Zero(eta.size());
  for (Index k = 0; k < na; ++k) eta_trial[active[k]] = eta[active[k]];

  Vector r(n + m + na);
  r.head(n) = -(p.Q * x + p.pi + p.A.transpose() * mu + p.B.transpose() * eta_trial);
  r.segment(n, m) = -(p.A * x - p.a);
  const Vector bx = p.B * x - p.b;
  for (Index k = 0; k < na; ++k) r[n + m + k] = -bx[active[k]];

  AugmentedLeastSquares ls(delta);
  if (!ls.factor(e)) return false;
  const Vector u = ls.solve(r, refine);
  if (!u.allFinite()) return false;

  x += u.head(n);
  for (Index f = 0; f < nf; ++f) mu[free_rows[f]] += u[n + f];
  for (Index k = 0; k < na; ++k) eta_trial[active[k]] += u[n + nf + k];
  eta = eta_trial;
  return true;
}

}  // namespace

void QpProblem::check() const {
  const Index n = pi.size();
  if (Q.rows() != n || Q.cols() != n) throw std::invalid_argument("Q must be n x n");
  if (A.cols() != n || A.rows() != a.size()) throw std::invalid_argument("A/a dimension mismatch");
  if (B.cols() != n || B.rows() != b.size()) throw std::invalid_argument("B/b dimension mismatch");
  for (auto r : pinned_duals) {
    if (static_cast<Index>(r) >= A.rows()) {
      throw std::invalid_argument("pinned dual refers to a missing equality row");
    }
  }
}

double QpProblem::objective(const Vector& x) const {
  return -pi.dot(x) - 0.5 * x.dot(Q * x);
}

double KktReport::worst() const {
  return std::max({stationarity, complementarity, primal_eq, primal_ineq, pinned,
                   std::max(0.0, -dual_feas)});
}

std::string to_string(QpStatus status) {
  switch (status) {
    case QpStatus::optimal:
      return "optimal";
    case QpStatus::infeasible:
      return "infeasible";
    case QpStatus::max_iter:
      return "max_iter";
  }
  return "unknown";
}

double residual_scale(const QpProblem& problem) {
  return 1.0 + inf_norm(problem.b) + inf_norm(problem.pi);
}

KktReport kkt_residuals(const QpProblem& p, const Vector& x, const Vector& mu, const Vector& eta) {
  if (x.size() != p.dim() || mu.size() != p.A.rows() || eta.size() != p.B.rows()) {
    throw std::invalid_argument("kkt_residuals: dimension mismatch");
  }
  KktReport r;
  r.stationarity = inf_norm(p.Q * x + p.pi + p.A.transpose() * mu + p.B.transpose() * eta);
  r.primal_eq = inf_norm(p.A * x - p.a);
  const Vector bx = p.B * x - p.b;
  r.primal_ineq = bx.size() == 0 ? 0.0 : std::max(0.0, bx.maxCoeff());
  r.complementarity = inf_norm(eta.cwiseProduct(bx));
  r.dual_feas = eta.size() == 0 ? 0.0 : eta.minCoeff();
  for (auto row : p.pinned_duals) r.pinned = std::max(r.pinned, std::abs(mu[static_cast<Index>(row)]));
  return r;
}

QpSolution solve_dual_form(const QpProblem& p, const QpOptions& opt) {
  p.check();
  const Index n = p.dim();
  const Index m = p.A.rows();
  const Index ni = p.B.rows();
  const double scale = residual_scale(p);
  const double tol = opt.tolerance * scale;
  const double delta = opt.regularization * std::max(1.0, max_abs(p.Q));

  NewtonSystem newton(p, delta);
  QpSolution sol;
  Vector x = Vector::Zero(n);
  Vector mu = Vector::Zero(m);
  Vector eta = Vector::Ones(ni);
  Vector s = (p.b - p.B * x).cwiseMax(1.0);

  auto report = [&](const Vector& xx, const Vector& mm, const Vector& ee) {
    return kkt_residuals(p, xx, mm, ee);
  };

  const double blowup = 1e14 * scale;
  QpStatus status = QpStatus::max_iter;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    const Vector rd = p.Q * x + p.pi + p.A.transpose() * mu + p.B.transpose() * eta;
    const Vector rp = p.A * x - p.a;
    const Vector ri = p.B * x + s - p.b;
    const double gap = ni > 0 ? eta.dot(s) / static_cast<double>(ni) : 0.0;

    const KktReport rep = report(x, mu, eta);
    if (rep.worst() <= tol && inf_norm(ri) <= tol) {
      status = QpStatus::optimal;
      break;
    }
    if (!x.allFinite() || !eta.allFinite() || inf_norm(x) > blowup || inf_norm(eta) > blowup ||
        inf_norm(mu) > blowup) {
      status = QpStatus::infeasible;
      break;
    }

    const Vector theta = eta.cwiseQuotient(s);
    if (!newton.factor(theta)) {
      status = QpStatus::infeasible;
      break;
    }

    auto direction = [&](const Vector& rc, Vector& dx, Vector& dmu, Vector& deta, Vector& ds) {
      const Vector tmp = (-rc + eta.cwiseProduct(ri)).cwiseQuotient(s);
      const Vector r1 = -rd - p.B.transpose() * tmp;
      newton.solve(r1, -rp, opt.refinement_steps, dx, dmu);
      ds = -ri - p.B * dx;
      deta = tmp + theta.cwiseProduct(p.B * dx);
    };

    Vector dx, dmu, deta, ds;
    if (ni == 0) {
      direction(Vector::Zero(0), dx, dmu, deta, ds);
      x += dx;
      mu += dmu;
      continue;
    }

    // Predictor.
    const Vector rc_aff = eta.cwiseProduct(s);
    direction(rc_aff, dx, dmu, deta, ds);
    const double a_aff = std::min(step_to_boundary(s, ds), step_to_boundary(eta, deta));
    const double gap_aff =
        (s + a_aff * ds).dot(eta + a_aff * deta) / static_cast<double>(ni);
    const double sigma = std::pow(std::clamp(gap_aff / gap, 0.0, 1.0), 3);

    // Corrector.
    const Vector rc = rc_aff + ds.cwiseProduct(deta) - Vector::Constant(ni, sigma * gap);
    direction(rc, dx, dmu, deta, ds);
    double alpha =
        std::min(1.0, 0.995 * std::min(step_to_boundary(s, ds), step_to_boundary(eta, deta)));

    // Mehrotra steps can cycle on nearly linear problems; compare against a
    // plain centered step and keep whichever reduces the merit more.
    const double infeas = std::max({inf_norm(rd), inf_norm(rp), inf_norm(ri)});
    auto merit = [&](double a, const Vector& dss, const Vector& dee) {
      return (1.0 - a) * infeas + (s + a * dss).dot(eta + a * dee) / static_cast<double>(ni);
    };
    const double m0 = infeas + gap;
    if (merit(alpha, ds, deta) > (1.0 - 0.1 * alpha) * m0) {
      Vector cx, cmu, ceta, cs;
      direction(rc_aff - Vector::Constant(ni, 0.3 * gap), cx, cmu, ceta, cs);
      double ca =
          std::min(1.0, 0.995 * std::min(step_to_boundary(s, cs), step_to_boundary(eta, ceta)));
      while (ca > 1e-6 && merit(ca, cs, ceta) > (1.0 - 0.1 * ca) * m0) ca *= 0.5;
      if (merit(ca, cs, ceta) < merit(alpha, ds, deta)) {
        dx = std::move(cx);
        dmu = std::move(cmu);
        deta = std::move(ceta);
        ds = std::move(cs);
        alpha = ca;
      }
    }

    x += alpha * dx;
    mu += alpha * dmu;
    eta += alpha * deta;
    s += alpha * ds;
    // Keep iterates strictly interior.
    s = s.cwiseMax(std::numeric_limits<double>::min());
    eta = eta.cwiseMax(std::numeric_limits<double>::min());
  }
  for (auto r : p.pinned_duals) mu[static_cast<Index>(r)] = 0.0;

  sol.iterations = it;
  sol.kkt = report(x, mu, eta);

  if (opt.polish && status != QpStatus::infeasible && x.allFinite()) {
    Vector px = x, pm = mu, pe = eta;
    if (polish(p, delta, opt.refinement_steps + 2, px, pm, pe, s)) {
      for (auto r : p.pinned_duals) pm[static_cast<Index>(r)] = 0.0;
      const KktReport pr = report(px, pm, pe);
      if (scaled_worst(pr, scale) < scaled_worst(sol.kkt, scale) ||
          (pr.worst() <= tol && status != QpStatus::optimal)) {
        x = px;
        mu = pm;
        eta = pe;
        sol.kkt = pr;
        sol.polished = true;
      }
    }
  }

  if (status != QpStatus::infeasible) {
    status = sol.kkt.worst() <= tol ? QpStatus::optimal : QpStatus::max_iter;
  }
  sol.status = status;
  sol.x = std::move(x);
  sol.eq_duals = std::move(mu);
  sol.ineq_duals = std::move(eta);
  sol.objective = p.objective(sol.x);
  return sol;
}

Phase1Result phase1_feasible(const SparseMatrix& A, const Vector& a, const SparseMatrix& B,
                             const Vector& b) {
  const Index n = A.cols();
  if (B.cols() != n || A.rows() != a.size() || B.rows() != b.size()) {
    throw std::invalid_argument("phase1_feasible: dimension mismatch");
  }

  // Equality consistency through a least-squares solve.
  Vector x0 = Vector::Zero(n);
  if (A.rows() > 0) {
    AugmentedLeastSquares ls(1e-12);
    ls.factor(A);
    x0 = ls.solve(a, 5);
    const double res = inf_norm(A * x0 - a);
    if (!(res <= 1e-8 * (1.0 + inf_norm(a)))) {
      throw InconsistentEqualities("equality constraints are inconsistent (residual " +
                                   std::to_string(res) + ")");
    }
  }
  if (B.rows() == 0) return {x0, -std::numeric_limits<double>::infinity()};

  // Variables (x, t): max -t  s.t.  A x = a,  B x - t <= b,  -t <= cap.
  const double cap = 1.0 + inf_norm(b);
  QpProblem lp;
  lp.Q.resize(n + 1, n + 1);
  lp.pi = Vector::Zero(n + 1);
  lp.pi[n] = 1.0;
  {
    std::vector<Triplet> t;
    for (int k = 0; k < A.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
        t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      }
    }
    lp.A.resize(A.rows(), n + 1);
    lp.A.setFromTriplets(t.begin(), t.end());
    lp.a = a;
  }
  {
    std::vector<Triplet> t;
    for (int k = 0; k < B.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(B, k); it; ++it) {
        t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      }
    }
    for (Index r = 0; r < B.rows(); ++r) t.emplace_back(static_cast<int>(r), static_cast<int>(n), -1.0);
    t.emplace_back(static_cast<int>(B.rows()), static_cast<int>(n), -1.0);
    lp.B.resize(B.rows() + 1, n + 1);
    lp.B.setFromTriplets(t.begin(), t.end());
    lp.b.resize(B.rows() + 1);
    lp.b << b, cap;
  }
  QpOptions opt;
  opt.tolerance = 1e-10;
  const QpSolution s = solve_dual_form(lp, opt);
  if (s.status == QpStatus::infeasible) {
    throw InconsistentEqualities("phase 1 problem could not be solved");
  }
  Phase1Result out;
  out.point = s.x.head(n);
  out.margin = (B * out.point - b).maxCoeff();
  return out;
}

}  // namespace fwdeq
