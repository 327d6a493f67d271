#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mgrid/channel.hpp"
#include "mgrid/common.hpp"
#include "mgrid/estimator.hpp"
#include "mgrid/grid.hpp"
#include "mgrid/steady_state.hpp"
#include "mgrid/training.hpp"

/**
 * Decentralized economic dispatch on top of the identified grid model, and
 * the cost indices that price the whole learn-then-dispatch cycle against an
 * omniscient merit-order reference.
 */
namespace mgrid {

/// Economic inputs of a dispatch study.
struct CostModel {
  Vec a;                          ///< per-unit generation cost (units/W)
  double c_extra_source = 12.0;   ///< backup source energy cost (units/W)
  double c_extra_storage = 12.0;  ///< backup storage absorption cost (units/W)
  double q = 0.0;                 ///< smoothness weight; 0 selects the cap
  double xi = 6.25e-4;            ///< half-width of the dispatch voltage band
  double tau_oed = 300.0;         ///< dispatch interval length (s)
  double backup_capacity = 0.0;   ///< backup rating (W); 0 derives a default

  void validate(int buses) const {
    require(a.size() == buses, ErrorCode::invalid_parameter,
            "cost vector length must equal bus count");
    require((a.array() > 0.0).all(), ErrorCode::invalid_parameter,
            "unit costs must be positive");
    const double top = a.maxCoeff();
    require(c_extra_source > top && c_extra_storage > top,
            ErrorCode::invalid_parameter,
            "backup energy must cost more than any regular unit");
    require(xi > 0.0 && tau_oed > 0.0, ErrorCode::invalid_parameter,
            "band half-width and dispatch interval must be positive");
  }

  double rating_or_default(const Vec& g) const {
    return backup_capacity > 0.0
               ? backup_capacity
               : static_cast<double>(g.size()) * g.maxCoeff();
  }
};

/**
 * Merit-order dispatch of total demand d_total over capacities g at unit
 * costs a. Strictly cheaper units load fully, strictly pricier units stay
 * off, and the marginal cost class splits its residual pro rata by capacity.
 * Equal-cost units are a single class, so the split is order-free.
 */
inline Vec dispatch(const Vec& a, const Vec& g, double d_total) {
  const int buses = static_cast<int>(g.size());
  require(a.size() == buses, ErrorCode::invalid_parameter,
          "cost vector length must equal capacity length");
  require((g.array() >= 0.0).all() && d_total >= 0.0,
          ErrorCode::invalid_parameter,
          "capacities and demand must be non-negative");
  Vec p(buses);
  for (int n = 0; n < buses; ++n) {
    double cheaper = 0.0;
    double klass = 0.0;
    for (int m = 0; m < buses; ++m) {
      if (a(m) < a(n)) cheaper += g(m);
      if (a(m) == a(n)) klass += g(m);
    }
    if (cheaper + klass <= d_total) {
      p(n) = g(n);
    } else if (cheaper >= d_total) {
      p(n) = 0.0;
    } else {
      p(n) = g(n) * (d_total - cheaper) / klass;
    }
  }
  return p;
}

/**
 * Converter settings realizing a dispatch target: fully loaded units hold
 * their power as current sources, idle units disconnect, and the marginal
 * units regulate with a tight droop around the slightly raised reference
 * (1+xi)x so they absorb the demand-estimate slack.
 */
inline std::vector<DroopSetting> assign_modes(const Vec& p_star, const Vec& g,
                                              const RatedEnvelope& env,
                                              double xi) {
  require(p_star.size() == g.size(), ErrorCode::invalid_parameter,
          "dispatch vector length must equal capacity length");
  std::vector<DroopSetting> out(static_cast<std::size_t>(p_star.size()));
  for (Index n = 0; n < p_star.size(); ++n) {
    DroopSetting& d = out[static_cast<std::size_t>(n)];
    if (p_star(n) <= 0.0 || g(n) <= 0.0) {
      d.kind = ConverterKind::off;
      d.x = env.x;
      d.dv = 0.0;
      d.s = 0.0;
      d.p = 0.0;
    } else if (p_star(n) == g(n)) {
      d.kind = ConverterKind::csc;
      d.x = env.x;
      d.dv = 0.0;
      d.s = 0.0;
      d.p = p_star(n);
    } else {
      d.kind = ConverterKind::vsc;
      d.x = (1.0 + xi) * env.x;
      d.dv = 2.0 * xi * env.x;
      d.s = 1.0 / ((d.x - d.dv) * d.dv);
      d.p = 0.0;
    }
  }
  return out;
}

/// Backup activation decision from the dispatched grid's mean voltage.
enum class BackupDecision { none, source, storage };

inline BackupDecision backup_signaling(double v_mean,
                                       const RatedEnvelope& env, double xi) {
  if (v_mean < (1.0 - xi) * env.x) return BackupDecision::source;
  if (v_mean > (1.0 + xi) * env.x) return BackupDecision::storage;
  return BackupDecision::none;
}

/**
 * Reported and solver-facing droop of the backup unit. Both variants pivot
 * at the raised reference (1+xi)x: the source injects below it (its reported
 * reference), while the storage absorbs above it, which its reported
 * reference at the upper margin expresses as pivot plus full drop.
 */
struct BackupDroop {
  DroopSetting reported;  ///< operator-facing setting
  double solver_x = 0.0;  ///< reference entering the droop current law
  double admittance = 0.0;  ///< slope times rating (S)
};

inline BackupDroop backup_droop(BackupDecision which, const RatedEnvelope& env,
                                double xi, double capacity) {
  require(which != BackupDecision::none, ErrorCode::invalid_parameter,
          "no backup droop without an activation decision");
  require(capacity > 0.0, ErrorCode::invalid_parameter,
          "backup capacity must be positive");
  const double pivot = (1.0 + xi) * env.x;
  const double dv = env.v_max - pivot;
  BackupDroop b;
  b.reported.kind = ConverterKind::vsc;
  b.reported.dv = dv;
  b.reported.x = which == BackupDecision::source ? pivot : env.v_max;
  b.reported.s = 1.0 / ((b.reported.x - dv) * dv);
  b.reported.p = 0.0;
  b.solver_x = pivot;
  b.admittance = b.reported.s * capacity;
  return b;
}

/// Realized single-interval operating state of a dispatched grid.
struct OedOutcome {
  Vec p_star;      ///< merit-order targets (W)
  Vec p_units;     ///< realized per-unit injections (W)
  double p_backup = 0.0;  ///< realized backup power (W, negative = absorbing)
  BackupDecision backup = BackupDecision::none;
  double v_mean = 0.0;
  double cost_rate = 0.0;  ///< a' p_units + backup energy charge
  Vec v;           ///< solved bus voltages
};

namespace detail {

struct DispatchedSolve {
  Vec v;
  bool ok = false;
};

/// Solves the dispatched single slot. Droop admittances are folded into the
/// slope row against unit capacities, current-source injections into the
/// constant-power demand, so buses can host a unit and the backup at once.
inline DispatchedSolve solve_dispatched(const std::vector<DroopSetting>& units,
                                        const GridParameters& theta,
                                        const RatedEnvelope& env,
                                        const BackupDroop* backup) {
  const int buses = theta.bus_count();
  GridParameters local = theta;
  local.g = Vec::Ones(buses);
  Vec x_row = Vec::Constant(buses, env.x);
  Vec s_row = Vec::Zero(buses);
  Modes modes(static_cast<std::size_t>(buses));
  for (int n = 0; n < buses; ++n) {
    const DroopSetting& u = units[static_cast<std::size_t>(n)];
    if (u.kind == ConverterKind::vsc) {
      const double y = u.s * theta.g(n);
      s_row(n) = y;
      x_row(n) = u.x;
      modes[static_cast<std::size_t>(n)].kind = ConverterKind::vsc;
    } else {
      modes[static_cast<std::size_t>(n)].kind = ConverterKind::off;
      if (u.kind == ConverterKind::csc) local.d_cp(n) -= u.p;
    }
  }
  if (backup) {
    // The backup shares bus 0; two droop lines on one bus combine into one
    // equivalent line because the current law is affine in the voltage.
    const double y0 = s_row(0);
    const double yb = backup->admittance;
    if (modes[0].kind == ConverterKind::vsc) {
      x_row(0) = (y0 * x_row(0) + yb * backup->solver_x) / (y0 + yb);
      s_row(0) = y0 + yb;
    } else {
      modes[0].kind = ConverterKind::vsc;
      x_row(0) = backup->solver_x;
      s_row(0) = yb;
    }
  }
  const SlotContext c(local, modes, env.x, /*checked=*/false);
  DispatchedSolve out;
  try {
    int iters = 0;
    const SolveOptions sopt;
    out.v = solve_slot(c, x_row, s_row, Vec::Constant(buses, env.x),
                       sopt.tol_scale * env.x, sopt, &iters);
    out.ok = true;
  } catch (const Error&) {
    out.ok = false;
  }
  return out;
}

/// Per-unit injections at a solved dispatched state.
inline Vec dispatched_injections(const Vec& v,
                                 const std::vector<DroopSetting>& units,
                                 const Vec& g) {
  Vec p(v.size());
  for (Index n = 0; n < v.size(); ++n) {
    const DroopSetting& u = units[static_cast<std::size_t>(n)];
    switch (u.kind) {
      case ConverterKind::vsc:
        p(n) = v(n) * (u.x - v(n)) * u.s * g(n);
        break;
      case ConverterKind::csc:
        p(n) = u.p;
        break;
      default:
        p(n) = 0.0;
    }
  }
  return p;
}

}  // namespace detail

/**
 * Realizes a dispatch: solves the dispatched grid, and when the solve fails
 * or the mean voltage leaves the band around the rated value, activates the
 * matching backup on bus 0 and solves once more. Costs are charged on
 * realized powers; backup energy is charged at its premium rate in either
 * flow direction.
 */
inline OedOutcome realize_dispatch(const std::vector<DroopSetting>& units,
                                   const GridParameters& theta,
                                   const RatedEnvelope& env,
                                   const CostModel& cost, const Vec& p_star) {
  const int buses = theta.bus_count();
  cost.validate(buses);
  OedOutcome out;
  out.p_star = p_star;

  detail::DispatchedSolve base =
      detail::solve_dispatched(units, theta, env, nullptr);
  if (base.ok) {
    out.backup = backup_signaling(base.v.mean(), env, cost.xi);
  } else {
    out.backup = BackupDecision::source;
  }

  BackupDroop droop;
  if (out.backup != BackupDecision::none) {
    droop = backup_droop(out.backup, env, cost.xi,
                         cost.rating_or_default(theta.g));
    base = detail::solve_dispatched(units, theta, env, &droop);
    require(base.ok, ErrorCode::non_convergence,
            "dispatched grid has no steady state even with backup");
  }
  out.v = base.v;
  out.v_mean = base.v.mean();
  out.p_units = detail::dispatched_injections(base.v, units, theta.g);
  if (out.backup != BackupDecision::none) {
    out.p_backup =
        base.v(0) * (droop.solver_x - base.v(0)) * droop.admittance;
  }
  const double premium = out.backup == BackupDecision::storage
                             ? cost.c_extra_storage
                             : cost.c_extra_source;
  out.cost_rate = cost.a.dot(out.p_units) +
                  (out.backup == BackupDecision::none
                       ? 0.0
                       : premium * std::abs(out.p_backup));
  return out;
}

/// Per-slot injected powers of every droop unit across a training epoch.
inline Mat training_powers(const Mat& v, const Mat& x, const Mat& s,
                           const Vec& g) {
  return (v.array() * (x - v).array() * s.array() *
          g.transpose().replicate(v.rows(), 1).array())
      .matrix();
}

/// Injections under the undisturbed nominal droop (the dispatch-free state
/// the smoothness index measures deviations from).
inline Vec nominal_powers(const TrainingPlan& plan, const Vec& g) {
  return (plan.chi.array() * (plan.x_tilde - plan.chi.array()) *
          plan.s_tilde * g.array())
      .matrix();
}

/**
 * Relative cost index of one learn-then-dispatch cycle: time-weighted cost
 * of the training slots plus the dispatched remainder, normalized by the
 * omniscient dispatch cost over the whole interval, minus one.
 */
inline double rci(const Mat& p_train, const Vec& a, double cost_rate_est,
                  double cost_rate_ideal, double tau, double tau_oed) {
  require(cost_rate_ideal > 0.0, ErrorCode::invalid_parameter,
          "reference cost rate must be positive");
  const double slots = static_cast<double>(p_train.rows());
  require(slots * tau <= tau_oed, ErrorCode::invalid_parameter,
          "training cannot outlast the dispatch interval");
  const double train_cost = tau * (p_train * a).sum();
  const double rest_cost = (tau_oed - slots * tau) * cost_rate_est;
  return (train_cost + rest_cost) / (tau_oed * cost_rate_ideal) - 1.0;
}

/**
 * Smoothness-penalized cost index: adds the time-accumulated squared
 * departure of every unit's training power from its undisturbed value,
 * measured in kW to match the index's reporting scale. A non-positive q
 * selects the cap tau / (tau_oed * reference cost).
 */
inline double qrci(double mu, const Mat& p_train, const Vec& p_tilde, double q,
                   double tau, double tau_oed, double cost_rate_ideal) {
  const double q_cap = tau / (tau_oed * cost_rate_ideal);
  const double weight = q > 0.0 ? q : q_cap;
  require(weight <= q_cap * (1.0 + 1e-12), ErrorCode::invalid_parameter,
          "smoothness weight exceeds its cap");
  const double quad =
      ((p_train.rowwise() - p_tilde.transpose()) / 1000.0).squaredNorm();
  return mu + weight * quad;
}

/// One full training-estimation-dispatch cycle of every controller.
struct OedEpochResult {
  double mu = 0.0;        ///< relative cost index
  double eta = 0.0;       ///< smoothness-penalized index
  OedOutcome realized;    ///< state under the self-dispatched modes
  OedOutcome ideal;       ///< state under omniscient dispatch
  Mat theta_hat;          ///< clamped full estimates, one column per unit
  Vec d_star_hat;         ///< each unit's total-demand estimate (W)
  int estimator_iterations_max = 0;
};

/**
 * Runs one epoch end to end: simulates the training protocol, lets every
 * controller demodulate and estimate independently, assigns each unit the
 * mode its own estimate implies, realizes both the self-dispatched and the
 * omniscient grids, and scores the cycle with both cost indices.
 */
inline OedEpochResult run_oed_epoch(const GridParameters& theta,
                                    const TrainingPlan& plan,
                                    const CostModel& cost, uint64_t seed,
                                    uint64_t trial = 0) {
  const int buses = theta.bus_count();
  cost.validate(buses);
  const EpochData epoch = simulate_epoch(theta, plan, seed, trial);
  const Mat p_train = training_powers(epoch.V, epoch.X, epoch.S, theta.g);

  const Mat x_bar = (plan.env.x + plan.sqrt_pi * plan.dx_bar.array()).matrix();
  const Index dim = theta_dim(buses);
  OedEpochResult out;
  out.theta_hat.resize(dim, buses);
  out.d_star_hat.resize(buses);

  std::vector<DroopSetting> self_units(static_cast<std::size_t>(buses));
  for (int n = 0; n < buses; ++n) {
    const ControllerObservations obs = split_observations(epoch.W, n, plan);
    const Mat w_local = demodulate(obs.w_alpha, obs.w_beta, obs.w_bar, n, plan);
    const Vec sig =
        compute_sigma_diag(obs.w_alpha, obs.w_beta, n, plan, epoch.sigma);
    EstimationResult est;
    try {
      est = run_jsise(w_local, x_bar, plan.s_bar, sig, n, theta.g(n),
                      plan.env.x);
    } catch (const MaxIterExceeded& e) {
      est = e.best;
    }
    out.estimator_iterations_max =
        std::max(out.estimator_iterations_max, est.iterations);
    const Vec theta_hat = clamp_reported(
        insert_own_capacity(est.theta_minus, n, theta.g(n), buses));
    out.theta_hat.col(n) = theta_hat;
    out.d_star_hat(n) =
        theta_hat.segment(buses, 3 * static_cast<Index>(buses)).sum();
    const Vec g_hat = theta_hat.head(buses);
    const Vec p_self = dispatch(cost.a, g_hat, out.d_star_hat(n));
    self_units[static_cast<std::size_t>(n)] =
        assign_modes(p_self, g_hat, plan.env, cost.xi)[static_cast<std::size_t>(
            n)];
  }

  const double d_star = theta.d_ca.sum() + theta.d_cc.sum() + theta.d_cp.sum();
  const Vec p_ideal = dispatch(cost.a, theta.g, d_star);
  const std::vector<DroopSetting> ideal_units =
      assign_modes(p_ideal, theta.g, plan.env, cost.xi);

  Vec p_self_targets(buses);
  for (int n = 0; n < buses; ++n) {
    const DroopSetting& u = self_units[static_cast<std::size_t>(n)];
    p_self_targets(n) = u.kind == ConverterKind::csc ? u.p : 0.0;
  }
  out.realized =
      realize_dispatch(self_units, theta, plan.env, cost, p_self_targets);
  out.ideal = realize_dispatch(ideal_units, theta, plan.env, cost, p_ideal);

  out.mu = rci(p_train, cost.a, out.realized.cost_rate, out.ideal.cost_rate,
               plan.tau, cost.tau_oed);
  out.eta = qrci(out.mu, p_train, nominal_powers(plan, theta.g), cost.q,
                 plan.tau, cost.tau_oed, out.ideal.cost_rate);
  return out;
}

}  // namespace mgrid
