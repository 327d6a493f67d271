#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/grid.hpp"
#include "mgrid/rng.hpp"
#include "mgrid/steady_state.hpp"

/**
 * Construction of the slotted training epoch.
 *
 * An epoch of T slots splits into:
 *  - M phase: T_bar slots of simultaneous random droop perturbations, giving
 *    every controller its own local measurement sequence;
 *  - sub-phase alpha: T_alpha slots of orthogonal pilot perturbations for
 *    implicit channel estimation;
 *  - sub-phase beta: T_bar blocks of L slots each; in block b every
 *    controller re-broadcasts its b-th M-phase measurement by amplitude
 *    modulating its reference-voltage perturbation;
 *  - idle remainder: leftover slots at nominal droop.
 */
namespace mgrid {

/// Phase tag for one slot of the epoch.
enum class SlotPhase { m, alpha, beta, idle };

/// Minimal epoch length (in slots) for the layout to carry enough rows.
inline double t_min_slots(int n) {
  return 0.5 * n * n + 5.0 * n + 2.5 - 1.0 / n;
}

/// Per-slot averaged measurement noise standard deviation.
inline double noise_std(double tau, double tau_transit, double phi_s,
                        double sigma_s) {
  require(tau > tau_transit, ErrorCode::invalid_parameter,
          "slot duration must exceed the transit time");
  require(phi_s > 0.0, ErrorCode::invalid_parameter,
          "sampling rate must be positive");
  return sigma_s / std::sqrt(phi_s * (tau - tau_transit));
}

/// Optional deviations from the reference-scenario plan constants.
struct PlanOptions {
  double kappa_alpha = 1.0;   ///< alpha amplitude scale
  double kappa_beta = 1.0;    ///< beta amplitude scale
  double x_tilde = 400.0;     ///< nominal reference voltage (V)
  double dv_tilde = 15.0;     ///< nominal droop drop (V)
  double dv = 15.0;           ///< M-phase max droop drop (V)
  double sigma_s = 0.1;       ///< per-sample noise std (V)
  double phi_s = 50e3;        ///< converter sampling rate (Hz)
  double tau_transit = 2.5e-3;  ///< per-slot transient settling time (s)
  std::optional<int> t_alpha;   ///< override (default 2N)
  std::optional<int> l_block;   ///< override (default 2N)
  int max_excitation_attempts = 100;
};

/**
 * Fully resolved training epoch: layout, code matrices, amplitudes, nominal
 * configuration, and the noise level. Immutable once built.
 */
struct TrainingPlan {
  int n = 0;        ///< bus count
  int t_total = 0;  ///< epoch length in slots
  int t_bar = 0;    ///< M-phase slot count
  int t_alpha = 0;  ///< alpha slot count
  int l_block = 0;  ///< slots per beta block
  int idle = 0;     ///< trailing idle slots

  double tau = 0.0;          ///< slot duration (s)
  double tau_transit = 0.0;  ///< transient part of each slot (s)
  double sqrt_pi = 0.0;      ///< M-phase perturbation amplitude (V)
  double kappa_alpha = 1.0;
  double kappa_beta = 1.0;
  double dv = 15.0;        ///< M-phase max droop drop (V)
  double x_tilde = 400.0;  ///< nominal reference voltage (V)
  double dv_tilde = 15.0;  ///< nominal droop drop (V)
  double s_tilde = 0.0;    ///< nominal droop slope (1/V^2)
  double sigma_s = 0.1;    ///< raw sample noise std (V)
  double phi_s = 50e3;     ///< sampling rate (Hz)
  double sigma = 0.0;      ///< per-slot averaged noise std (V)

  Mat dx_bar;    ///< T_bar x N, entries +-1 (M-phase signs)
  Mat s_bar;     ///< T_bar x N M-phase droop slopes
  Mat dx_alpha;  ///< T_alpha x N orthogonal pilot codes
  Mat dx_beta;   ///< L x N per-block codes (identical across blocks)
  Vec chi;       ///< modulation offsets: nominal steady-state voltages (V)

  RatedEnvelope env;

  double sqrt_pi_alpha() const { return kappa_alpha * sqrt_pi; }
  double sqrt_pi_beta() const { return kappa_beta * sqrt_pi; }
  double delta_alpha() const { return static_cast<double>(t_alpha) / n; }
  double delta_beta() const { return static_cast<double>(l_block) / n; }

  int m_slot(int b) const { return b; }
  int alpha_slot(int k) const { return t_bar + k; }
  int beta_slot(int b, int l) const {
    return t_bar + t_alpha + b * l_block + l;
  }
  int used_slots() const { return t_bar * (1 + l_block) + t_alpha; }

  SlotPhase phase_of(int t) const {
    if (t < t_bar) return SlotPhase::m;
    if (t < t_bar + t_alpha) return SlotPhase::alpha;
    if (t < used_slots()) return SlotPhase::beta;
    return SlotPhase::idle;
  }
};

namespace detail {

/// Stacked e_n (x) [+1,-1,...] codes: zero-sum, mutually orthogonal columns.
inline Mat interleaved_codes(int n, int slots) {
  require(slots % (2 * n) == 0 && slots >= 2 * n,
          ErrorCode::invalid_parameter,
          "code phase length must be a positive multiple of 2N");
  const int delta = slots / n;
  Mat dx = Mat::Zero(slots, n);
  for (int m = 0; m < n; ++m)
    for (int k = 0; k < delta; ++k) dx(m * delta + k, m) = (k % 2 == 0) ? 1.0 : -1.0;
  return dx;
}

}  // namespace detail

/// Rank-condition report for a candidate M-phase realization.
struct ExcitationReport {
  bool pass = false;
  std::vector<Index> rank_theta_minus;  ///< per controller n
  Index required_theta_minus = 0;
  Index rank_gamma = 0;
  Index required_gamma = 0;
};

/**
 * Verifies the identifiability rank conditions at a solved M-phase state:
 * every reduced parameter Jacobian (own capacity column removed) must have
 * full column rank, and the voltage Jacobian must be invertible. Columns are
 * normalized before the singular value test so the verdict does not depend
 * on the very different physical scales of the parameter classes; singular
 * values above 1e-8 times the largest one count toward rank.
 */
inline ExcitationReport check_sufficient_excitation(const Mat& ups,
                                                    const Mat& gamma, int n) {
  ExcitationReport rep;
  rep.required_theta_minus = theta_dim(n) - 1;
  rep.required_gamma = gamma.rows();
  auto rank_of = [](const Mat& m) {
    Mat scaled = m;
    for (Index c = 0; c < scaled.cols(); ++c) {
      const double norm = scaled.col(c).norm();
      if (norm > 0.0) scaled.col(c) /= norm;
    }
    Eigen::JacobiSVD<Mat> svd(scaled);
    const Vec& sv = svd.singularValues();
    if (sv.size() == 0) return Index(0);
    const double thresh = 1e-8 * sv(0);
    return static_cast<Index>((sv.array() > thresh).count());
  };
  bool all_theta = true;
  for (int c = 0; c < n; ++c) {
    Mat reduced(ups.rows(), ups.cols() - 1);
    reduced << ups.leftCols(c), ups.rightCols(ups.cols() - c - 1);
    const Index r = rank_of(reduced);
    rep.rank_theta_minus.push_back(r);
    all_theta = all_theta && (r == rep.required_theta_minus);
  }
  rep.rank_gamma = rank_of(gamma);
  rep.pass = all_theta && rep.rank_gamma == rep.required_gamma;
  return rep;
}

/**
 * Draws M-phase perturbation signs and slopes until the realization passes
 * the excitation check at its own noiseless solved state. The slope law
 * keeps each perturbed unit's droop sized so the M-phase voltage floor is
 * respected for any amplitude below dv.
 */
inline void gen_mphase(TrainingPlan& plan, const GridParameters& theta,
                       std::uint64_t seed, std::uint64_t trial = 0,
                       int max_attempts = 100) {
  const int n = plan.n;
  const int tb = plan.t_bar;
  require(plan.sqrt_pi < plan.dv, ErrorCode::invalid_parameter,
          "M-phase amplitude must stay below the droop drop");
  // Zero amplitude carries no excitation to verify; keep the first draw so
  // the degenerate uniform realization is still inspectable.
  const bool verify = plan.sqrt_pi > 0.0;
  if (verify && static_cast<Index>(n) * tb < theta_dim(n) - 1) {
    fail(ErrorCode::excitation_not_found,
         "M-phase row count can never reach the required rank");
  }
  const double x0 = plan.env.x;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Mat dx(tb, n), s(tb, n), x(tb, n);
    for (int t = 0; t < tb; ++t) {
      for (int m = 0; m < n; ++m) {
        // Trial and retry attempt share one counter word; attempts are
        // capped at 100 so 7 bits suffice.
        Rng r(seed, RngPurpose::mphase_codes,
              trial * 128 + static_cast<std::uint64_t>(attempt),
              static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(m));
        dx(t, m) = r.sign();
        x(t, m) = x0 + plan.sqrt_pi * dx(t, m);
        s(t, m) = 1.0 / (plan.dv * (x(t, m) - x0 + plan.dv));
      }
    }
    if (!verify) {
      plan.dx_bar = std::move(dx);
      plan.s_bar = std::move(s);
      return;
    }
    const SolveResult sol =
        solve_steady_state(x, s, theta, all_vsc(n), plan.env);
    const Mat ups = jacobian_theta(sol.V, x, s, all_vsc(n), plan.env.x);
    const Mat gamma =
        jacobian_voltage(sol.V, x, s, theta, all_vsc(n), plan.env.x);
    if (check_sufficient_excitation(ups, gamma, n).pass) {
      plan.dx_bar = std::move(dx);
      plan.s_bar = std::move(s);
      return;
    }
  }
  fail(ErrorCode::excitation_not_found,
       "no sufficiently exciting M-phase realization found");
}

/**
 * Builds a complete training plan: layout arithmetic, pilot codes, nominal
 * configuration (slope, offsets chi from a noiseless nominal solve), noise
 * level, and a sufficiently exciting M-phase realization.
 */
inline TrainingPlan make_plan(int n, int t, double tau, double sqrt_pi,
                              std::uint64_t seed, const GridParameters& theta,
                              const RatedEnvelope& env,
                              const PlanOptions& opt = PlanOptions{},
                              std::uint64_t trial = 0) {
  require(n >= 1, ErrorCode::invalid_parameter, "need at least one bus");
  if (static_cast<double>(t) < t_min_slots(n)) {
    fail(ErrorCode::too_few_slots,
         "epoch length below the minimum for this bus count");
  }
  env.validate();
  require(sqrt_pi >= 0.0 && sqrt_pi < opt.dv, ErrorCode::invalid_parameter,
          "amplitude must satisfy 0 <= sqrt_pi < dv");
  require(opt.x_tilde + opt.dv <= env.v_max, ErrorCode::invalid_parameter,
          "nominal reference plus drop must stay below v_max");

  TrainingPlan plan;
  plan.n = n;
  plan.t_total = t;
  plan.t_alpha = opt.t_alpha.value_or(2 * n);
  plan.l_block = opt.l_block.value_or(2 * n);
  plan.t_bar = (t - plan.t_alpha) / (1 + plan.l_block);
  plan.idle = t - plan.t_bar * (1 + plan.l_block) - plan.t_alpha;
  require(plan.t_bar >= 1, ErrorCode::too_few_slots,
          "layout leaves no measurement slots");

  plan.tau = tau;
  plan.tau_transit = opt.tau_transit;
  plan.sqrt_pi = sqrt_pi;
  plan.kappa_alpha = opt.kappa_alpha;
  plan.kappa_beta = opt.kappa_beta;
  plan.dv = opt.dv;
  plan.x_tilde = opt.x_tilde;
  plan.dv_tilde = opt.dv_tilde;
  plan.s_tilde = droop_from_capacity(opt.x_tilde, opt.dv_tilde, 1.0).first;
  plan.sigma_s = opt.sigma_s;
  plan.phi_s = opt.phi_s;
  plan.sigma = opt.sigma_s == 0.0
                   ? 0.0
                   : noise_std(tau, opt.tau_transit, opt.phi_s, opt.sigma_s);
  plan.env = env;

  plan.dx_alpha = detail::interleaved_codes(n, plan.t_alpha);
  plan.dx_beta = detail::interleaved_codes(n, plan.l_block);

  // Offsets: the steady state under nominal droop, solved once, noiselessly.
  const Mat x_nom = Mat::Constant(1, n, plan.x_tilde);
  const Mat s_nom = Mat::Constant(1, n, plan.s_tilde);
  plan.chi =
      solve_steady_state(x_nom, s_nom, theta, all_vsc(n), env).V.row(0);

  gen_mphase(plan, theta, seed, trial, opt.max_excitation_attempts);
  return plan;
}

/// Simulated epoch: true voltages, noisy measurements, applied droop inputs.
struct EpochData {
  Mat V;  ///< T x N true steady-state voltages
  Mat W;  ///< T x N measured voltages (V plus slot noise)
  Mat X;  ///< T x N applied reference voltages
  Mat S;  ///< T x N applied droop slopes
  double sigma = 0.0;
  int margin_violations = 0;
};

/**
 * Runs one full training epoch against the true grid: M phase, pilot phase,
 * modulated broadcast phase (amplitudes computed from each controller's own
 * noisy M-phase measurements), idle tail. Every slot is solved with the
 * exact nonlinear balance; measurement noise is keyed by (trial, slot, bus).
 */
inline EpochData simulate_epoch(const GridParameters& theta,
                                const TrainingPlan& plan, std::uint64_t seed,
                                std::uint64_t trial = 0) {
  const int n = plan.n;
  const int t_total = plan.t_total;
  require(plan.dx_bar.rows() == plan.t_bar && plan.dx_bar.cols() == n,
          ErrorCode::invalid_parameter, "plan lacks an M-phase realization");

  EpochData out;
  out.sigma = plan.sigma;
  out.V.resize(t_total, n);
  out.W.resize(t_total, n);
  out.X.resize(t_total, n);
  out.S.resize(t_total, n);

  const Modes modes = all_vsc(n);
  detail::SlotContext ctx(theta, modes, plan.env.x);
  const SolveOptions sopt;
  const double tol_abs = sopt.tol_scale * plan.env.x;
  Vec warm = plan.chi;

  auto run_slot = [&](int t) {
    const Vec x_row = out.X.row(t).transpose();
    const Vec s_row = out.S.row(t).transpose();
    int iters = 0;
    const Vec v =
        detail::solve_slot(ctx, x_row, s_row, warm, tol_abs, sopt, &iters);
    warm = v;
    out.V.row(t) = v.transpose();
    for (int m = 0; m < n; ++m) {
      double noise = 0.0;
      if (plan.sigma > 0.0) {
        Rng r(seed, RngPurpose::measurement_noise, trial,
              static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(m));
        noise = plan.sigma * r.normal();
      }
      out.W(t, m) = out.V(t, m) + noise;
    }
  };

  // M phase: random sign perturbations with the amplitude-dependent slopes.
  for (int b = 0; b < plan.t_bar; ++b) {
    const int t = plan.m_slot(b);
    out.X.row(t) = (plan.env.x + plan.sqrt_pi * plan.dx_bar.row(b).array())
                       .matrix();
    out.S.row(t) = plan.s_bar.row(b);
    run_slot(t);
  }
  // Pilot sub-phase: orthogonal codes at constant amplitude, nominal slopes.
  for (int k = 0; k < plan.t_alpha; ++k) {
    const int t = plan.alpha_slot(k);
    out.X.row(t) =
        (plan.x_tilde + plan.sqrt_pi_alpha() * plan.dx_alpha.row(k).array())
            .matrix();
    out.S.row(t).setConstant(plan.s_tilde);
    run_slot(t);
  }
  // Broadcast sub-phase: block b re-encodes each controller's own noisy
  // measurement from M-phase slot b as its perturbation amplitude.
  for (int b = 0; b < plan.t_bar; ++b) {
    for (int l = 0; l < plan.l_block; ++l) {
      const int t = plan.beta_slot(b, l);
      for (int m = 0; m < n; ++m) {
        const double amp =
            plan.sqrt_pi_beta() * (out.W(plan.m_slot(b), m) - plan.chi(m));
        out.X(t, m) = plan.x_tilde + amp * plan.dx_beta(l, m);
      }
      out.S.row(t).setConstant(plan.s_tilde);
      run_slot(t);
    }
  }
  // Idle tail at nominal droop.
  for (int t = plan.used_slots(); t < t_total; ++t) {
    out.X.row(t).setConstant(plan.x_tilde);
    out.S.row(t).setConstant(plan.s_tilde);
    run_slot(t);
  }

  out.margin_violations = static_cast<int>(((out.V.array() < plan.env.v_min) ||
                                            (out.V.array() > plan.env.v_max))
                                               .count());
  return out;
}

}  // namespace mgrid
