#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/grid.hpp"

/**
 * Per-slot power-balance residual of the droop-controlled DC grid, its
 * Jacobians with respect to parameters and voltages, and a damped Newton
 * solver.
 *
 * Slots are fully decoupled: the residual at slot t depends only on row t of
 * the voltage, reference, and slope matrices. The voltage Jacobian is
 * therefore block diagonal with one N x N block per slot, and all stacked
 * matrices use the column-major vectorization of T x N matrices (bus-major:
 * entry index n*T + t).
 */
namespace mgrid {

/// Per-bus converter mode for one epoch (time-invariant within the epoch).
struct BusMode {
  ConverterKind kind = ConverterKind::vsc;
  double p = 0.0;  ///< injected power (W) when kind == csc

  double zeta() const { return kind == ConverterKind::vsc ? 1.0 : 0.0; }
  /// Power actually injected by a non-droop unit (off injects nothing).
  double injection() const { return kind == ConverterKind::csc ? p : 0.0; }
};

using Modes = std::vector<BusMode>;

inline Modes all_vsc(int n) { return Modes(static_cast<std::size_t>(n)); }

namespace detail {

/// Shared per-call context: Laplacian and load coefficients.
struct SlotContext {
  Mat y;        ///< N x N conductance Laplacian
  Vec load_a;   ///< d_ca / x^2 (S)
  Vec load_b;   ///< d_cc / x (A)
  Vec load_p;   ///< d_cp (W)
  Vec g;        ///< capacities (W)
  Vec zeta;     ///< 1 for VSC, 0 otherwise
  Vec p_fixed;  ///< CSC injections (W)

  /// checked=false skips sign validation; estimator iterates may hold
  /// slightly negative transient values that are clamped only on report.
  SlotContext(const GridParameters& theta, const Modes& modes, double rated_x,
              bool checked = true) {
    if (checked) theta.validate();
    const int n = theta.bus_count();
    require(static_cast<int>(modes.size()) == n, ErrorCode::invalid_parameter,
            "modes length must equal bus count");
    require(rated_x > 0.0, ErrorCode::invalid_parameter,
            "rated voltage must be positive");
    y = laplacian_from_full_psi(theta.psi, n);
    load_a = theta.d_ca / (rated_x * rated_x);
    load_b = theta.d_cc / rated_x;
    load_p = theta.d_cp;
    g = theta.g;
    zeta.resize(n);
    p_fixed.resize(n);
    for (int m = 0; m < n; ++m) {
      zeta(m) = modes[static_cast<std::size_t>(m)].zeta();
      p_fixed(m) = modes[static_cast<std::size_t>(m)].injection();
    }
  }
};

/// Residual of one slot: power balance per bus at voltages v.
inline Vec slot_residual(const SlotContext& c, const Vec& v, const Vec& x_row,
                         const Vec& s_row) {
  const Vec yv = c.y * v;
  const Vec droop = c.zeta.array() * s_row.array() * c.g.array();
  return v.array() * v.array() * (droop.array() + c.load_a.array()) +
         v.array() * yv.array() -
         v.array() * (droop.array() * x_row.array() - c.load_b.array()) +
         c.load_p.array() - c.p_fixed.array();
}

/// Voltage Jacobian of one slot (dense N x N).
inline Mat slot_jacobian_v(const SlotContext& c, const Vec& v,
                           const Vec& x_row, const Vec& s_row) {
  const int n = static_cast<int>(v.size());
  const Vec yv = c.y * v;
  const Vec droop = c.zeta.array() * s_row.array() * c.g.array();
  Mat j = v.asDiagonal() * c.y;
  for (int m = 0; m < n; ++m) {
    j(m, m) += 2.0 * v(m) * (droop(m) + c.load_a(m)) + yv(m) -
               (droop(m) * x_row(m) - c.load_b(m));
  }
  return j;
}

/// Parameter Jacobian of one slot (N x theta_dim); zeta holds per-bus flags.
inline Mat slot_jacobian_theta(const Vec& v, const Vec& x_row,
                               const Vec& s_row, const Vec& zeta,
                               double rated_x) {
  const int n = static_cast<int>(v.size());
  Mat ups = Mat::Zero(n, theta_dim(n));
  for (int m = 0; m < n; ++m) {
    ups(m, m) = zeta(m) * s_row(m) * v(m) * (v(m) - x_row(m));
    ups(m, n + m) = v(m) * v(m) / (rated_x * rated_x);
    ups(m, 2 * n + m) = v(m) / rated_x;
    ups(m, 3 * n + m) = 1.0;
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const Index col = 4 * n + pair_index(i, j, n);
      const double diff = v(i) - v(j);
      ups(i, col) = v(i) * diff;
      ups(j, col) = -v(j) * diff;
    }
  }
  return ups;
}

}  // namespace detail

/**
 * Residual matrix: entry (t, n) is the power-balance mismatch at bus n in
 * slot t, given voltages V, droop references X and slopes S (all T x N),
 * parameters theta, per-bus modes, and the rated voltage anchoring the
 * constant-conductance and constant-current load terms.
 */
inline Mat residual_omega(const Mat& V, const Mat& X, const Mat& S,
                          const GridParameters& theta, const Modes& modes,
                          double rated_x) {
  require(V.rows() == X.rows() && V.rows() == S.rows() &&
              V.cols() == X.cols() && V.cols() == S.cols() &&
              V.cols() == theta.bus_count(),
          ErrorCode::invalid_parameter, "V, X, S dimension mismatch");
  detail::SlotContext c(theta, modes, rated_x);
  Mat omega(V.rows(), V.cols());
  for (Index t = 0; t < V.rows(); ++t) {
    omega.row(t) = detail::slot_residual(c, V.row(t).transpose(),
                                         X.row(t).transpose(),
                                         S.row(t).transpose())
                       .transpose();
  }
  return omega;
}

/**
 * Jacobian of vec(residual) with respect to the packed parameter vector.
 * The residual is linear in theta, so this matrix satisfies
 * vec(residual) = jacobian_theta * theta - (1-zeta) .* p exactly.
 *
 * Rows follow the column-major vectorization (index n*T + t); columns follow
 * the theta layout [g; d_ca; d_cc; d_cp; psi].
 */
inline Mat jacobian_theta(const Mat& V, const Mat& X, const Mat& S,
                          const Modes& modes, double rated_x) {
  const int n = static_cast<int>(V.cols());
  const Index t_count = V.rows();
  Vec zeta(n);
  for (int m = 0; m < n; ++m) zeta(m) = modes[static_cast<std::size_t>(m)].zeta();
  Mat ups = Mat::Zero(n * t_count, theta_dim(n));
  for (Index t = 0; t < t_count; ++t) {
    const Mat blk = detail::slot_jacobian_theta(
        V.row(t).transpose(), X.row(t).transpose(), S.row(t).transpose(), zeta,
        rated_x);
    for (int m = 0; m < n; ++m)
      ups.row(static_cast<Index>(m) * t_count + t) = blk.row(m);
  }
  return ups;
}

/**
 * Jacobian of vec(residual) with respect to vec(V): block diagonal over
 * slots after permutation; assembled dense in the vectorized ordering.
 */
inline Mat jacobian_voltage(const Mat& V, const Mat& X, const Mat& S,
                            const GridParameters& theta, const Modes& modes,
                            double rated_x) {
  detail::SlotContext c(theta, modes, rated_x);
  const int n = static_cast<int>(V.cols());
  const Index t_count = V.rows();
  Mat gamma = Mat::Zero(n * t_count, n * t_count);
  for (Index t = 0; t < t_count; ++t) {
    const Mat j = detail::slot_jacobian_v(c, V.row(t).transpose(),
                                          X.row(t).transpose(),
                                          S.row(t).transpose());
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        gamma(static_cast<Index>(a) * t_count + t,
              static_cast<Index>(b) * t_count + t) = j(a, b);
  }
  return gamma;
}

/// Options for the per-slot Newton solver. The default tolerance sits close
/// to the double-precision floor of the balance residual so that noise-free
/// epochs are exact for downstream consumers; convergence is quadratic, so
/// the tight setting costs about one extra iteration per slot.
struct SolveOptions {
  double tol_scale = 1e-11;  ///< residual tolerance is tol_scale * rated x
  int max_iterations = 50;
  int max_halvings = 30;
  bool check_margins = true;
};

/// Solver output: voltages plus diagnostics.
struct SolveResult {
  Mat V;                      ///< T x N steady-state voltages
  int newton_iterations = 0;  ///< summed over slots
  int margin_violations = 0;  ///< entries outside [v_min, v_max]
};

namespace detail {

inline Vec solve_slot(const SlotContext& c, const Vec& x_row, const Vec& s_row,
                      Vec v, double tol_abs, const SolveOptions& opt,
                      int* iters_out) {
  Vec om = slot_residual(c, v, x_row, s_row);
  double err = om.lpNorm<Eigen::Infinity>();
  int it = 0;
  while (err >= tol_abs) {
    require(it < opt.max_iterations, ErrorCode::non_convergence,
            "Newton iteration limit reached");
    const Mat j = slot_jacobian_v(c, v, x_row, s_row);
    const Vec step = j.partialPivLu().solve(-om);
    double lambda = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opt.max_halvings; ++h) {
      const Vec cand = v + lambda * step;
      require((cand.array() > 0.0).all(), ErrorCode::zero_voltage_collapse,
              "voltage iterate collapsed to zero or below");
      const Vec om_cand = slot_residual(c, cand, x_row, s_row);
      const double err_cand = om_cand.lpNorm<Eigen::Infinity>();
      if (err_cand < err || err_cand < tol_abs) {
        v = cand;
        om = om_cand;
        err = err_cand;
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    require(accepted, ErrorCode::non_convergence,
            "damping failed to reduce the residual");
    ++it;
  }
  if (iters_out) *iters_out += it;
  return v;
}

}  // namespace detail

/**
 * Solves every slot of the epoch for its steady-state voltages with damped
 * Newton iterations. Initialization is the flat profile at the rated voltage
 * (the physical high-voltage operating branch) unless v_init supplies a
 * starting matrix. Margin violations are counted, not fatal.
 */
inline SolveResult solve_steady_state(
    const Mat& X, const Mat& S, const GridParameters& theta,
    const Modes& modes, const RatedEnvelope& env,
    const std::optional<Mat>& v_init = std::nullopt,
    const SolveOptions& opt = SolveOptions{}) {
  env.validate();
  require(X.rows() == S.rows() && X.cols() == S.cols() &&
              X.cols() == theta.bus_count(),
          ErrorCode::invalid_parameter, "X, S dimension mismatch");
  detail::SlotContext c(theta, modes, env.x);
  const double tol_abs = opt.tol_scale * env.x;
  SolveResult out;
  out.V.resize(X.rows(), X.cols());
  for (Index t = 0; t < X.rows(); ++t) {
    Vec v0 = v_init ? Vec(v_init->row(t).transpose())
                    : Vec(Vec::Constant(X.cols(), env.x));
    out.V.row(t) = detail::solve_slot(c, X.row(t).transpose(),
                                      S.row(t).transpose(), std::move(v0),
                                      tol_abs, opt, &out.newton_iterations)
                       .transpose();
  }
  if (opt.check_margins) {
    out.margin_violations = static_cast<int>(
        ((out.V.array() < env.v_min) || (out.V.array() > env.v_max)).count());
  }
  return out;
}

/**
 * Direct linear solution of one slot, valid only when every unit is
 * droop-governed and all constant-power demands vanish: dividing the balance
 * by the (positive) bus voltage leaves a linear system in v.
 */
inline Vec solve_linear_slot(const Vec& x_row, const Vec& s_row,
                             const GridParameters& theta, double rated_x) {
  theta.validate();
  require((theta.d_cp.array() == 0.0).all(), ErrorCode::invalid_parameter,
          "linear slot solve requires zero constant-power demand");
  const int n = theta.bus_count();
  const Mat y = laplacian_from_full_psi(theta.psi, n);
  Mat lhs = y;
  Vec rhs(n);
  for (int m = 0; m < n; ++m) {
    const double droop = s_row(m) * theta.g(m);
    lhs(m, m) += droop + theta.d_ca(m) / (rated_x * rated_x);
    rhs(m) = x_row(m) * droop - theta.d_cc(m) / rated_x;
  }
  return lhs.partialPivLu().solve(rhs);
}

/// Per-bus injected powers at a solved slot (droop units and CSC units).
inline Vec injections(const Vec& v, const Vec& x_row, const Vec& s_row,
                      const GridParameters& theta, const Modes& modes) {
  const int n = theta.bus_count();
  Vec p(n);
  for (int m = 0; m < n; ++m) {
    const auto& mode = modes[static_cast<std::size_t>(m)];
    p(m) = mode.kind == ConverterKind::vsc
               ? v(m) * (x_row(m) - v(m)) * s_row(m) * theta.g(m)
               : mode.injection();
  }
  return p;
}

/**
 * Power-conservation gap at one solved slot: total injection minus ZIP
 * consumption minus line losses. Near zero at any solution of the balance.
 */
inline double conservation_gap(const Vec& v, const Vec& x_row,
                               const Vec& s_row, const GridParameters& theta,
                               const Modes& modes, double rated_x) {
  const Mat y = laplacian_from_full_psi(theta.psi, theta.bus_count());
  const Vec p = injections(v, x_row, s_row, theta, modes);
  const double zip =
      (theta.d_ca.array() * v.array().square() / (rated_x * rated_x) +
       theta.d_cc.array() * v.array() / rated_x + theta.d_cp.array())
          .sum();
  const double losses = v.dot(y * v);
  return p.sum() - zip - losses;
}

}  // namespace mgrid
