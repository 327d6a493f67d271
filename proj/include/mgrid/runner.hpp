#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mgrid/channel.hpp"
#include "mgrid/common.hpp"
#include "mgrid/crlb.hpp"
#include "mgrid/csvio.hpp"
#include "mgrid/dispatch.hpp"
#include "mgrid/estimator.hpp"
#include "mgrid/rng.hpp"
#include "mgrid/scenario.hpp"
#include "mgrid/steady_state.hpp"
#include "mgrid/training.hpp"
#include "mgrid/version.hpp"

/**
 * Monte Carlo drivers and the command layer behind the CLI. Every study is
 * deterministic for a given (scenario, seed) pair at any parallelism level:
 * trial results land in slots indexed by trial number and all reductions run
 * in that fixed order afterwards.
 */
namespace mgrid {

/// Runs body(trial) for trial in [0, trials) on up to `parallelism` threads.
template <typename Body>
inline void parallel_trials(int trials, int parallelism, const Body& body) {
  require(trials >= 0 && parallelism >= 1, ErrorCode::invalid_parameter,
          "trial and thread counts must be positive");
  if (parallelism <= 1 || trials <= 1) {
    for (int i = 0; i < trials; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex guard;
  std::exception_ptr first_error;
  const int workers = parallelism < trials ? parallelism : trials;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < trials; i = next.fetch_add(1)) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(guard);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

/// Sample mean and its Monte Carlo standard error.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& xs) {
  require(!xs.empty(), ErrorCode::invalid_parameter, "no samples");
  const double k = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / k;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var = xs.size() > 1 ? var / (k - 1.0) : 0.0;
  return {mean, std::sqrt(var / k)};
}

/// Relative RMSE (and its delta-method standard error) from per-trial
/// squared error norms.
inline MeanSe rrmse_se(const std::vector<double>& squared_norms,
                       double truth_norm) {
  require(truth_norm > 0.0, ErrorCode::invalid_parameter,
          "RRMSE needs a nonzero reference");
  const MeanSe ms = mean_se(squared_norms);
  require(ms.mean > 0.0, ErrorCode::invalid_parameter,
          "zero mean squared error leaves RRMSE scale undefined");
  const double rmse = std::sqrt(ms.mean);
  return {rmse / truth_norm, ms.se / (2.0 * rmse * truth_norm)};
}

/// Gathers entries of a vector at the given positions.
inline Vec gather(const Vec& v, const std::vector<Index>& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    out(static_cast<Index>(i)) = v(idx[i]);
  return out;
}

/// Human-readable name of one packed-parameter component (1-based buses).
inline std::string theta_component_name(Index k, int buses) {
  if (k < buses) return "g[" + std::to_string(k + 1) + "]";
  if (k < 2 * buses) return "d_ca[" + std::to_string(k - buses + 1) + "]";
  if (k < 3 * buses) return "d_cc[" + std::to_string(k - 2 * buses + 1) + "]";
  if (k < 4 * buses) return "d_cp[" + std::to_string(k - 3 * buses + 1) + "]";
  const Index p = k - 4 * buses;
  for (int i = 0; i < buses; ++i) {
    for (int j = i + 1; j < buses; ++j) {
      if (pair_index(i, j, buses) == p) {
        return "psi[" + std::to_string(i + 1) + "-" + std::to_string(j + 1) +
               "]";
      }
    }
  }
  fail(ErrorCode::invalid_parameter, "component index out of range");
}

inline std::string theta_component_unit(Index k, int buses) {
  return k < 4 * buses ? "W" : "S";
}

inline const char* backup_name(BackupDecision b) {
  switch (b) {
    case BackupDecision::source:
      return "source";
    case BackupDecision::storage:
      return "storage";
    default:
      return "none";
  }
}

inline const char* phase_name(SlotPhase p) {
  switch (p) {
    case SlotPhase::m:
      return "m";
    case SlotPhase::alpha:
      return "alpha";
    case SlotPhase::beta:
      return "beta";
    default:
      return "idle";
  }
}

/// Independent per-trial parameter draw for randomized studies: capacities
/// and demands uniform in [0, max], line conductances kept at the scenario
/// values. Keyed by (seed, trial, bus) so results are order-free.
inline GridParameters draw_theta(const Scenario& sc, uint64_t seed,
                                 uint64_t trial) {
  GridParameters p = sc.theta;
  for (int m = 0; m < sc.buses; ++m) {
    Rng r(seed, RngPurpose::theta_draw, trial, static_cast<uint64_t>(m), 0);
    p.g(m) = r.uniform(0.0, sc.g_max);
    p.d_ca(m) = r.uniform(0.0, sc.d_ca_max);
    p.d_cc(m) = r.uniform(0.0, sc.d_cc_max);
    p.d_cp(m) = r.uniform(0.0, sc.d_cp_max);
  }
  return p;
}

inline TrainingPlan plan_from_scenario(const Scenario& sc, double tau,
                                       double sqrt_pi, uint64_t seed,
                                       uint64_t trial = 0) {
  return make_plan(sc.buses, sc.t_slots, tau, sqrt_pi, seed, sc.theta, sc.env,
                   sc.plan_options, trial);
}

/// One controller's full single-trial estimation pass.
struct TrialEstimate {
  EstimationResult est;
  Mat w_local;
  Vec sigma_diag;
  bool hit_iteration_cap = false;
};

inline TrialEstimate estimate_trial(const GridParameters& theta,
                                    const TrainingPlan& plan, int n,
                                    uint64_t seed, uint64_t trial) {
  const EpochData epoch = simulate_epoch(theta, plan, seed, trial);
  const ControllerObservations obs = split_observations(epoch.W, n, plan);
  TrialEstimate out;
  out.w_local = demodulate(obs.w_alpha, obs.w_beta, obs.w_bar, n, plan);
  out.sigma_diag =
      compute_sigma_diag(obs.w_alpha, obs.w_beta, n, plan, epoch.sigma);
  const Mat x_bar = (plan.env.x + plan.sqrt_pi * plan.dx_bar.array()).matrix();
  try {
    out.est = run_jsise(out.w_local, x_bar, plan.s_bar, out.sigma_diag, n,
                        theta.g(n), plan.env.x);
  } catch (const MaxIterExceeded& e) {
    out.est = e.best;
    out.hit_iteration_cap = true;
  }
  return out;
}

namespace detail {

/// Closed-form error bound for one plan: noiseless steady states, the real
/// noise level in the covariance.
inline ClosedFormBounds closed_form_point(const TrainingPlan& plan,
                                          const GridParameters& theta, int n,
                                          uint64_t seed, uint64_t trial) {
  TrainingPlan quiet = plan;
  quiet.sigma = 0.0;
  const EpochData ep = simulate_epoch(theta, quiet, seed, trial);
  const ControllerObservations obs = split_observations(ep.W, n, quiet);
  const Vec sig =
      compute_sigma_diag(obs.w_alpha, obs.w_beta, n, quiet, plan.sigma);
  Mat v_bar(plan.t_bar, plan.n);
  for (int b = 0; b < plan.t_bar; ++b) v_bar.row(b) = ep.V.row(plan.m_slot(b));
  const Mat x_bar = (plan.env.x + plan.sqrt_pi * plan.dx_bar.array()).matrix();
  return closed_form_bounds(v_bar, x_bar, plan.s_bar, theta, n, sig,
                            plan.env.x);
}

/// Per-block bound RRMSEs for one (plan, truth) pair.
struct BoundSummary {
  double g = 0.0, d = 0.0, psi = 0.0, d_star = 0.0, theta = 0.0;
  double fim_condition = 0.0;
};

inline BoundSummary summarize_bounds(const ClosedFormBounds& cf,
                                     const GridParameters& theta, int n) {
  const int buses = static_cast<int>(theta.g.size());
  const Vec theta_minus = drop_own_capacity(pack_theta(theta), n);
  BoundSummary out;
  const std::vector<Index> idx_g = capacity_indices_reduced(n, buses);
  out.g = rrmse_from_bound(subset(cf.theta_block, idx_g),
                           gather(theta_minus, idx_g));
  std::vector<Index> idx_d;
  for (int klass = 0; klass < 3; ++klass)
    for (Index i : demand_indices_reduced(klass, n, buses)) idx_d.push_back(i);
  out.d = rrmse_from_bound(subset(cf.theta_block, idx_d),
                           gather(theta_minus, idx_d));
  const std::vector<Index> idx_psi = line_indices_reduced(n, buses);
  out.psi = rrmse_from_bound(subset(cf.theta_block, idx_psi),
                             gather(theta_minus, idx_psi));
  const Vec d_star = theta.d_ca + theta.d_cc + theta.d_cp;
  out.d_star =
      rrmse_from_bound(demand_total_bound(cf.theta_block, n, buses), d_star);
  out.theta = rrmse_from_bound(cf.theta_block, theta_minus);
  out.fim_condition = cf.fim_condition;
  return out;
}

}  // namespace detail

/// Accuracy study at one probing amplitude: empirical RRMSE per parameter
/// block against the averaged closed-form bound.
struct RrmsePointResult {
  double sqrt_pi = 0.0;
  double tau = 0.0;
  int trials = 0;
  MeanSe g, psi, d, d_star, theta;          ///< empirical RRMSE + MC error
  double g_bound = 0.0, psi_bound = 0.0, d_bound = 0.0, d_star_bound = 0.0,
         theta_bound = 0.0;
  double fim_condition = 0.0;               ///< worst over bound evaluations
  int iteration_cap_hits = 0;
};

inline RrmsePointResult run_rrmse_point(const Scenario& sc, double sqrt_pi,
                                        double tau, int trials, uint64_t seed,
                                        int parallel, int bound_plans = 25) {
  require(trials >= 2, ErrorCode::invalid_parameter,
          "need at least two trials");
  const int n = sc.controller;
  const int buses = sc.buses;
  const TrainingPlan plan0 =
      plan_from_scenario(sc, tau, sqrt_pi, seed, /*trial=*/0);

  const Vec theta_full = pack_theta(sc.theta);
  const Vec theta_minus = drop_own_capacity(theta_full, n);
  const std::vector<Index> idx_g = capacity_indices_reduced(n, buses);
  std::vector<Index> idx_d;
  for (int klass = 0; klass < 3; ++klass)
    for (Index i : demand_indices_reduced(klass, n, buses)) idx_d.push_back(i);
  const std::vector<Index> idx_psi = line_indices_reduced(n, buses);
  const Vec truth_g = gather(theta_minus, idx_g);
  const Vec truth_d = gather(theta_minus, idx_d);
  const Vec truth_psi = gather(theta_minus, idx_psi);
  const Vec truth_d_star = sc.theta.d_ca + sc.theta.d_cc + sc.theta.d_cp;

  const int k_bounds = bound_plans < trials ? bound_plans : trials;
  std::vector<double> sq_g(trials), sq_psi(trials), sq_d(trials),
      sq_dstar(trials), sq_theta(trials);
  std::vector<detail::BoundSummary> bounds(static_cast<std::size_t>(k_bounds));
  std::vector<int> cap_hits(static_cast<std::size_t>(trials), 0);

  parallel_trials(trials, parallel, [&](int trial) {
    TrainingPlan plan = plan0;
    if (trial > 0) {
      gen_mphase(plan, sc.theta, seed, static_cast<uint64_t>(trial),
                 sc.plan_options.max_excitation_attempts);
    }
    const TrialEstimate te = estimate_trial(sc.theta, plan, n, seed,
                                            static_cast<uint64_t>(trial));
    cap_hits[static_cast<std::size_t>(trial)] = te.hit_iteration_cap ? 1 : 0;
    const Vec err = te.est.theta_minus - theta_minus;
    sq_g[static_cast<std::size_t>(trial)] = gather(err, idx_g).squaredNorm();
    sq_psi[static_cast<std::size_t>(trial)] =
        gather(err, idx_psi).squaredNorm();
    sq_d[static_cast<std::size_t>(trial)] = gather(err, idx_d).squaredNorm();
    sq_theta[static_cast<std::size_t>(trial)] = err.squaredNorm();
    const Vec theta_hat =
        insert_own_capacity(te.est.theta_minus, n, sc.theta.g(n), buses);
    Vec d_star_hat(buses);
    for (int m = 0; m < buses; ++m) {
      d_star_hat(m) = theta_hat(buses + m) + theta_hat(2 * buses + m) +
                      theta_hat(3 * buses + m);
    }
    sq_dstar[static_cast<std::size_t>(trial)] =
        (d_star_hat - truth_d_star).squaredNorm();

    if (trial < k_bounds) {
      const ClosedFormBounds cf = detail::closed_form_point(
          plan, sc.theta, n, seed, static_cast<uint64_t>(trial));
      bounds[static_cast<std::size_t>(trial)] =
          detail::summarize_bounds(cf, sc.theta, n);
    }
  });

  RrmsePointResult out;
  out.sqrt_pi = sqrt_pi;
  out.tau = tau;
  out.trials = trials;
  out.g = rrmse_se(sq_g, truth_g.norm());
  out.psi = rrmse_se(sq_psi, truth_psi.norm());
  out.d = rrmse_se(sq_d, truth_d.norm());
  out.d_star = rrmse_se(sq_dstar, truth_d_star.norm());
  out.theta = rrmse_se(sq_theta, theta_minus.norm());
  for (const detail::BoundSummary& b : bounds) {
    out.g_bound += b.g / k_bounds;
    out.psi_bound += b.psi / k_bounds;
    out.d_bound += b.d / k_bounds;
    out.d_star_bound += b.d_star / k_bounds;
    out.theta_bound += b.theta / k_bounds;
    out.fim_condition = std::max(out.fim_condition, b.fim_condition);
  }
  for (int h : cap_hits) out.iteration_cap_hits += h;
  return out;
}

/// Cost study at one (amplitude, slot-duration) grid point.
struct RciPointResult {
  double sqrt_pi = 0.0;
  double tau = 0.0;
  int trials = 0;
  MeanSe mu;
  MeanSe eta;
  double backup_fraction = 0.0;  ///< trials where self-dispatch used backup
};

inline RciPointResult run_rci_point(const Scenario& sc, double sqrt_pi,
                                    double tau, int trials, uint64_t seed,
                                    int parallel) {
  require(trials >= 2, ErrorCode::invalid_parameter,
          "need at least two trials");
  const TrainingPlan plan =
      plan_from_scenario(sc, tau, sqrt_pi, seed, /*trial=*/0);
  std::vector<double> mu(static_cast<std::size_t>(trials));
  std::vector<double> eta(static_cast<std::size_t>(trials));
  std::vector<int> backup(static_cast<std::size_t>(trials), 0);

  parallel_trials(trials, parallel, [&](int trial) {
    const GridParameters theta =
        draw_theta(sc, seed, static_cast<uint64_t>(trial));
    const OedEpochResult r = run_oed_epoch(theta, plan, sc.cost, seed,
                                           static_cast<uint64_t>(trial));
    mu[static_cast<std::size_t>(trial)] = r.mu;
    eta[static_cast<std::size_t>(trial)] = r.eta;
    backup[static_cast<std::size_t>(trial)] =
        r.realized.backup != BackupDecision::none ? 1 : 0;
  });

  RciPointResult out;
  out.sqrt_pi = sqrt_pi;
  out.tau = tau;
  out.trials = trials;
  out.mu = mean_se(mu);
  out.eta = mean_se(eta);
  int hits = 0;
  for (int b : backup) hits += b;
  out.backup_fraction = static_cast<double>(hits) / trials;
  return out;
}

/// Options shared by every command. Unset fields fall back to the scenario
/// file, then to built-in defaults.
struct RunOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<int> trials;
  std::string out;
  int parallel = 1;
};

/// Exit status classes for the CLI: configuration problems versus numerical
/// failures.
inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::config_error:
    case ErrorCode::io_error:
    case ErrorCode::invalid_topology:
    case ErrorCode::invalid_parameter:
    case ErrorCode::too_few_slots:
      return 2;
    default:
      return 3;
  }
}

namespace detail {

inline std::string output_path(const std::string& command, const Scenario& sc,
                               const RunOptions& opt) {
  if (!opt.out.empty()) return opt.out;
  std::string base = sc.out_dir;
  if (base.empty()) {
    const char* dir = std::getenv("MGRID_OUT_DIR");
    base = dir && *dir ? std::string(dir) : std::string(".");
  }
  return base + "/" + command + ".csv";
}

/// Grid with reference per-bus values at an arbitrary size, for bus-count
/// sweeps.
inline GridParameters reference_theta(int buses) {
  const Topology topo = Topology::line(buses);
  return GridParameters::from_sparse(
      topo, Vec::Constant(buses, 1000.0), Vec::Constant(buses, 200.0),
      Vec::Constant(buses, 200.0), Vec::Zero(buses),
      Vec::Ones(static_cast<Index>(topo.edges.size())));
}

inline ResultTable table_solve(const Scenario& sc) {
  const int n = sc.buses;
  const Mat x_nom = Mat::Constant(1, n, sc.plan_options.x_tilde);
  const double s_tilde =
      droop_from_capacity(sc.plan_options.x_tilde, sc.plan_options.dv_tilde,
                          1.0)
          .first;
  const Mat s_nom = Mat::Constant(1, n, s_tilde);
  const SolveResult sol =
      solve_steady_state(x_nom, s_nom, sc.theta, all_vsc(n), sc.env);
  const Vec v = sol.V.row(0).transpose();
  const Vec p = injections(v, x_nom.row(0).transpose(),
                           s_nom.row(0).transpose(), sc.theta, all_vsc(n));
  ResultTable t({"bus", "voltage", "power"}, {"-", "V", "W"});
  for (int m = 0; m < n; ++m) {
    t.add_row({std::to_string(m + 1), ResultTable::field(v(m)),
               ResultTable::field(p(m))});
  }
  return t;
}

inline ResultTable table_train(const Scenario& sc, uint64_t seed) {
  const TrainingPlan plan = plan_from_scenario(sc, sc.tau, sc.sqrt_pi, seed);
  const EpochData ep = simulate_epoch(sc.theta, plan, seed, 0);
  std::vector<std::string> cols{"slot", "phase"};
  std::vector<std::string> units{"-", "-"};
  for (int m = 0; m < sc.buses; ++m) {
    cols.push_back("v[" + std::to_string(m + 1) + "]");
    units.push_back("V");
  }
  for (int m = 0; m < sc.buses; ++m) {
    cols.push_back("w[" + std::to_string(m + 1) + "]");
    units.push_back("V");
  }
  ResultTable t(cols, units);
  for (int s = 0; s < plan.t_total; ++s) {
    std::vector<std::string> row{std::to_string(s + 1),
                                 phase_name(plan.phase_of(s))};
    for (int m = 0; m < sc.buses; ++m)
      row.push_back(ResultTable::field(ep.V(s, m)));
    for (int m = 0; m < sc.buses; ++m)
      row.push_back(ResultTable::field(ep.W(s, m)));
    t.add_row(row);
  }
  return t;
}

inline ResultTable table_estimate(const Scenario& sc, uint64_t seed) {
  const TrainingPlan plan = plan_from_scenario(sc, sc.tau, sc.sqrt_pi, seed);
  const TrialEstimate te =
      estimate_trial(sc.theta, plan, sc.controller, seed, 0);
  const Vec truth = drop_own_capacity(pack_theta(sc.theta), sc.controller);
  ResultTable t({"component", "unit", "truth", "estimate", "abs_error"},
                {"-", "-", "-", "-", "-"});
  Index reduced = 0;
  for (Index k = 0; k < theta_dim(sc.buses); ++k) {
    if (k == sc.controller) continue;
    t.add_row({theta_component_name(k, sc.buses),
               theta_component_unit(k, sc.buses),
               ResultTable::field(truth(reduced)),
               ResultTable::field(te.est.theta_minus(reduced)),
               ResultTable::field(
                   std::abs(te.est.theta_minus(reduced) - truth(reduced)))});
    ++reduced;
  }
  return t;
}

inline ResultTable table_crlb(const Scenario& sc, uint64_t seed) {
  ResultTable t({"sweep", "value", "tau", "g_bound", "d_bound", "psi_bound",
                 "d_star_bound", "theta_bound", "fim_condition"},
                {"-", "-", "ms", "-", "-", "-", "-", "-", "-"});
  auto add = [&](const char* sweep, double value, const BoundSummary& b) {
    t.add_row({sweep, ResultTable::field(value),
               ResultTable::field(sc.tau * 1e3), ResultTable::field(b.g),
               ResultTable::field(b.d), ResultTable::field(b.psi),
               ResultTable::field(b.d_star), ResultTable::field(b.theta),
               ResultTable::field(b.fim_condition)});
  };
  for (double sp : sc.sweep_sqrt_pi) {
    const TrainingPlan plan = plan_from_scenario(sc, sc.tau, sp, seed);
    const ClosedFormBounds cf =
        closed_form_point(plan, sc.theta, sc.controller, seed, 0);
    add("sqrt_pi", sp, summarize_bounds(cf, sc.theta, sc.controller));
  }
  PlanOptions opts = sc.plan_options;
  opts.t_alpha.reset();
  opts.l_block.reset();
  for (int buses = 2; buses <= 8; ++buses) {
    const GridParameters theta = reference_theta(buses);
    const TrainingPlan plan = make_plan(buses, sc.t_slots, sc.tau, sc.sqrt_pi,
                                        seed, theta, sc.env, opts);
    const ClosedFormBounds cf = closed_form_point(plan, theta, 0, seed, 0);
    add("buses", buses, summarize_bounds(cf, theta, 0));
  }
  return t;
}

inline ResultTable table_doed(const Scenario& sc, uint64_t seed) {
  const TrainingPlan plan = plan_from_scenario(sc, sc.tau, sc.sqrt_pi, seed);
  const OedEpochResult r = run_oed_epoch(sc.theta, plan, sc.cost, seed, 0);
  const double d_star_true =
      sc.theta.d_ca.sum() + sc.theta.d_cc.sum() + sc.theta.d_cp.sum();
  ResultTable t({"mu", "eta", "cost_rate_self", "cost_rate_ideal",
                 "backup_self", "backup_ideal", "d_star_true",
                 "d_star_estimate_mean"},
                {"-", "-", "units", "units", "-", "-", "W", "W"});
  t.add_row({ResultTable::field(r.mu), ResultTable::field(r.eta),
             ResultTable::field(r.realized.cost_rate),
             ResultTable::field(r.ideal.cost_rate),
             backup_name(r.realized.backup), backup_name(r.ideal.backup),
             ResultTable::field(d_star_true),
             ResultTable::field(r.d_star_hat.mean())});
  return t;
}

inline ResultTable table_sweep_rrmse(const Scenario& sc, uint64_t seed,
                                     int trials, int parallel) {
  ResultTable t({"sqrt_pi", "tau", "trials", "g_rrmse", "g_se", "g_bound",
                 "psi_rrmse", "psi_se", "psi_bound", "d_rrmse", "d_se",
                 "d_bound", "d_star_rrmse", "d_star_se", "d_star_bound"},
                {"V", "ms", "count", "-", "-", "-", "-", "-", "-", "-", "-",
                 "-", "-", "-", "-"});
  for (double sp : sc.sweep_sqrt_pi) {
    const RrmsePointResult r =
        run_rrmse_point(sc, sp, sc.tau, trials, seed, parallel);
    t.add_row({ResultTable::field(sp), ResultTable::field(sc.tau * 1e3),
               std::to_string(trials), ResultTable::field(r.g.mean),
               ResultTable::field(r.g.se), ResultTable::field(r.g_bound),
               ResultTable::field(r.psi.mean), ResultTable::field(r.psi.se),
               ResultTable::field(r.psi_bound), ResultTable::field(r.d.mean),
               ResultTable::field(r.d.se), ResultTable::field(r.d_bound),
               ResultTable::field(r.d_star.mean),
               ResultTable::field(r.d_star.se),
               ResultTable::field(r.d_star_bound)});
  }
  return t;
}

inline ResultTable table_sweep_rci(const Scenario& sc, uint64_t seed,
                                   int trials, int parallel) {
  ResultTable t({"tau", "sqrt_pi", "mu", "eta", "mu_se", "eta_se", "trials",
                 "backup_fraction"},
                {"ms", "V", "-", "-", "-", "-", "count", "-"});
  for (double sp : sc.sweep_sqrt_pi) {
    for (double tau_ms : sc.sweep_tau_ms) {
      const RciPointResult r =
          run_rci_point(sc, sp, tau_ms * 1e-3, trials, seed, parallel);
      t.add_row({ResultTable::field(tau_ms), ResultTable::field(sp),
                 ResultTable::field(r.mu.mean), ResultTable::field(r.eta.mean),
                 ResultTable::field(r.mu.se), ResultTable::field(r.eta.se),
                 std::to_string(trials),
                 ResultTable::field(r.backup_fraction)});
    }
  }
  return t;
}

/// Provenance sidecar written next to every CSV.
inline void write_manifest(const std::string& csv_path,
                           const std::string& command, const Scenario& sc,
                           uint64_t seed, int trials,
                           const std::vector<std::string>& columns) {
  const std::string path = csv_path + ".manifest";
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open for writing: " + path);
  f << "command: " << command << "\n";
  f << "version: " << kVersion << "\n";
  f << "scenario_hash: " << sc.hash << "\n";
  f << "buses: " << sc.buses << "\n";
  f << "topology: " << sc.topology_name << "\n";
  f << "controller: " << sc.controller + 1 << "\n";
  f << "seed: " << seed << "\n";
  f << "trials: " << trials << "\n";
  f << "rng_scheme: counter-based split streams keyed by (seed, purpose, "
       "trial, slot, bus); purposes: probing codes, measurement noise, "
       "parameter draws, dispatch instances\n";
  if (command != "sweep-rrmse" && command != "sweep-rci") {
    const TrainingPlan plan = plan_from_scenario(sc, sc.tau, sc.sqrt_pi, seed);
    f << "t_slots: " << plan.t_total << "\n";
    f << "t_bar: " << plan.t_bar << "\n";
    f << "t_alpha: " << plan.t_alpha << "\n";
    f << "l_block: " << plan.l_block << "\n";
    f << "idle: " << plan.idle << "\n";
    f << "tau_ms: " << ResultTable::field(plan.tau * 1e3) << "\n";
    f << "sqrt_pi: " << ResultTable::field(plan.sqrt_pi) << "\n";
    f << "sigma: " << ResultTable::field(plan.sigma) << "\n";
  }
  f << "columns: ";
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i) f << ",";
    f << columns[i];
  }
  f << "\n";
  f.flush();
  require(f.good(), ErrorCode::io_error, "write failed: " + path);
}

}  // namespace detail

/**
 * Executes one command against a scenario file and writes its CSV result
 * plus a provenance manifest. Returns the CSV path. Commands: solve, train,
 * estimate, crlb, doed, sweep-rrmse, sweep-rci.
 */
inline std::string run_command(const std::string& command,
                               const RunOptions& opt) {
  require(!opt.config_path.empty(), ErrorCode::config_error,
          "a scenario file is required (--config)");
  require(opt.parallel >= 1, ErrorCode::config_error,
          "--parallel must be at least 1");
  const Scenario sc = load_scenario(opt.config_path);
  const uint64_t seed = opt.seed.value_or(sc.seed);
  const int trials = opt.trials.value_or(sc.trials);
  require(trials >= 2, ErrorCode::config_error, "--trials must be at least 2");

  ResultTable table({"x"}, {"-"});
  if (command == "solve") {
    table = detail::table_solve(sc);
  } else if (command == "train") {
    table = detail::table_train(sc, seed);
  } else if (command == "estimate") {
    table = detail::table_estimate(sc, seed);
  } else if (command == "crlb") {
    table = detail::table_crlb(sc, seed);
  } else if (command == "doed") {
    table = detail::table_doed(sc, seed);
  } else if (command == "sweep-rrmse") {
    table = detail::table_sweep_rrmse(sc, seed, trials, opt.parallel);
  } else if (command == "sweep-rci") {
    table = detail::table_sweep_rci(sc, seed, trials, opt.parallel);
  } else {
    fail(ErrorCode::config_error, "unknown command: " + command);
  }
  table.scenario_hash = sc.hash;
  table.seed = seed;
  const std::string path = detail::output_path(command, sc, opt);
  table.write(path);
  detail::write_manifest(path, command, sc, seed, trials, table.columns);
  return path;
}

}  // namespace mgrid
