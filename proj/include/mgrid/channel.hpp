#pragma once

#include <cmath>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/training.hpp"

/**
 * The C-phase implicit communication channel.
 *
 * Around the nominal droop operating point, a small reference-voltage
 * perturbation on the transmitting buses moves every bus voltage linearly:
 * each receiving controller n sees  w_n = v_n(nominal) + (amplitudes) * h_n
 * on its own bus, where h_n collects the voltage gains from every bus to
 * bus n. Pilot codes in sub-phase alpha estimate h_n; in sub-phase beta the
 * same codes carry amplitude-modulated M-phase measurements, which the
 * receiver demodulates ratiometrically (so the channel gain cancels).
 */
namespace mgrid {

/**
 * Closed-form least-squares channel estimate from the pilot sub-phase.
 * Zero-sum codes annihilate the constant nominal voltage, and orthogonality
 * reduces the normal equations to a scaled correlation.
 */
inline Vec estimate_channel(const Vec& w_alpha, const Mat& dx_alpha,
                            double sqrt_pi_alpha) {
  require(w_alpha.size() == dx_alpha.rows(), ErrorCode::invalid_parameter,
          "pilot measurement length mismatch");
  const double delta = dx_alpha.cwiseProduct(dx_alpha).sum() /
                       static_cast<double>(dx_alpha.cols());
  require(delta > 0.0 && sqrt_pi_alpha != 0.0, ErrorCode::invalid_parameter,
          "degenerate pilot configuration");
  return (dx_alpha.transpose() * w_alpha) / (sqrt_pi_alpha * delta);
}

/// Per-block modulation amplitudes for one controller's measurement column.
inline Vec modulate_amplitudes(const Vec& w_bar_own, double chi_own,
                               double sqrt_pi_beta) {
  return sqrt_pi_beta * (w_bar_own.array() - chi_own).matrix();
}

/**
 * Reconstructs the full M-phase measurement matrix at controller n from its
 * own pilot and broadcast-phase bus-voltage measurements. The own column is
 * kept as directly measured; no channel round trip is involved there.
 *
 * Throws NearZeroChannel when a channel gain estimate is too small for the
 * ratiometric division to be meaningful.
 */
inline Mat demodulate(const Vec& w_alpha, const std::vector<Vec>& w_beta,
                      const Vec& w_bar_own, int n, const TrainingPlan& plan) {
  const int buses = plan.n;
  const int tb = plan.t_bar;
  require(static_cast<int>(w_beta.size()) == tb, ErrorCode::invalid_parameter,
          "one broadcast block per M-phase slot required");
  require(w_bar_own.size() == tb, ErrorCode::invalid_parameter,
          "own measurement column length mismatch");
  require(n >= 0 && n < buses, ErrorCode::invalid_parameter,
          "controller index out of range");

  const Vec r_alpha = plan.dx_alpha.transpose() * w_alpha;
  const Vec h_hat = r_alpha / (plan.sqrt_pi_alpha() * plan.delta_alpha());
  for (int m = 0; m < buses; ++m) {
    require(std::abs(h_hat(m)) >= 1e-9, ErrorCode::near_zero_channel,
            "estimated channel gain too close to zero");
  }

  const double scale = (plan.sqrt_pi_alpha() * plan.delta_alpha()) /
                       (plan.sqrt_pi_beta() * plan.delta_beta());
  Mat w_local(tb, buses);
  for (int b = 0; b < tb; ++b) {
    require(w_beta[static_cast<std::size_t>(b)].size() == plan.l_block,
            ErrorCode::invalid_parameter, "broadcast block length mismatch");
    const Vec r_beta =
        plan.dx_beta.transpose() * w_beta[static_cast<std::size_t>(b)];
    w_local.row(b) =
        (scale * (r_beta.array() / r_alpha.array()) + plan.chi.array())
            .transpose();
  }
  w_local.col(n) = w_bar_own;
  return w_local;
}

/**
 * Diagonal of the demodulation-error covariance for controller n's local
 * copy, in the column-major (bus-major) vectorization of the T_bar x N
 * matrix. First-order noise propagation through the ratiometric demodulator
 * yields three contributions per entry: direct slot noise, pilot-correlation
 * noise scaled by the inverse squared channel response, and the carried
 * signal amplitude re-scaled by the pilot response.
 *
 * A non-positive sigma selects the normalized mode (unit noise variance);
 * the estimator is invariant to that overall scale.
 */
inline Vec compute_sigma_diag(const Vec& w_alpha,
                              const std::vector<Vec>& w_beta, int n,
                              const TrainingPlan& plan, double sigma) {
  const int buses = plan.n;
  const int tb = plan.t_bar;
  require(static_cast<int>(w_beta.size()) == tb, ErrorCode::invalid_parameter,
          "one broadcast block per M-phase slot required");
  // Validity region of the first-order approximation: the pilot response
  // must not drive the received voltage past zero or double the nominal.
  const double v_nom = plan.chi(n);
  require((w_alpha.array() > 0.0).all() &&
              (w_alpha.array() < 2.0 * v_nom).all(),
          ErrorCode::invalid_parameter,
          "pilot measurements outside the covariance validity region");

  const double s2 = sigma > 0.0 ? sigma * sigma : 1.0;
  const double pi_a = plan.sqrt_pi_alpha() * plan.sqrt_pi_alpha();
  const double pi_b = plan.sqrt_pi_beta() * plan.sqrt_pi_beta();
  const double da = plan.delta_alpha();
  const double db = plan.delta_beta();
  const double c2 = pi_a * da * da / (pi_b * db);
  const double c3 = pi_a * da * da * da / (pi_b * db * db);

  const Vec u = plan.dx_alpha.transpose() * w_alpha;
  Vec diag(static_cast<Index>(buses) * tb);
  for (int b = 0; b < tb; ++b) {
    const Vec q = plan.dx_beta.transpose() * w_beta[static_cast<std::size_t>(b)];
    for (int m = 0; m < buses; ++m) {
      const double u2 = u(m) * u(m);
      diag(static_cast<Index>(m) * tb + b) =
          s2 * (1.0 + c2 / u2 + c3 * q(m) * q(m) / (u2 * u2));
    }
  }
  return diag;
}

/// Dense covariance assembled from the (structurally diagonal) entries.
inline Mat compute_sigma(const Vec& w_alpha, const std::vector<Vec>& w_beta,
                         int n, const TrainingPlan& plan, double sigma) {
  return compute_sigma_diag(w_alpha, w_beta, n, plan, sigma).asDiagonal();
}

/// Convenience partition of a controller's full-epoch measurement column.
struct ControllerObservations {
  Vec w_bar;                ///< own M-phase measurements (T_bar)
  Vec w_alpha;              ///< pilot-phase measurements (T_alpha)
  std::vector<Vec> w_beta;  ///< broadcast blocks (T_bar entries of length L)
};

inline ControllerObservations split_observations(const Mat& w_full, int n,
                                                 const TrainingPlan& plan) {
  ControllerObservations obs;
  obs.w_bar.resize(plan.t_bar);
  for (int b = 0; b < plan.t_bar; ++b) obs.w_bar(b) = w_full(plan.m_slot(b), n);
  obs.w_alpha.resize(plan.t_alpha);
  for (int k = 0; k < plan.t_alpha; ++k)
    obs.w_alpha(k) = w_full(plan.alpha_slot(k), n);
  obs.w_beta.resize(static_cast<std::size_t>(plan.t_bar));
  for (int b = 0; b < plan.t_bar; ++b) {
    Vec blk(plan.l_block);
    for (int l = 0; l < plan.l_block; ++l)
      blk(l) = w_full(plan.beta_slot(b, l), n);
    obs.w_beta[static_cast<std::size_t>(b)] = std::move(blk);
  }
  return obs;
}

}  // namespace mgrid
