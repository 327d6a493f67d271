#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/grid.hpp"
#include "mgrid/steady_state.hpp"

/**
 * Joint maximum-likelihood identification of grid parameters and true bus
 * voltages from one controller's reconstructed measurement matrix.
 *
 * The unknowns are the packed parameter vector with the controller's own
 * (known) capacity removed, plus the noise-free voltages of every retained
 * slot. The power-balance residual constrains them; measurement noise with
 * the demodulation covariance defines the likelihood. Each iteration solves
 * the equality-constrained quadratic subproblem obtained by linearizing the
 * balance in the voltages (it is already linear in the parameters).
 */
namespace mgrid {

/// Rebuilds the full parameter vector from the reduced one.
inline Vec insert_own_capacity(const Vec& theta_minus, int n, double g_own,
                               int buses) {
  const Index dim = theta_dim(buses);
  require(theta_minus.size() == dim - 1, ErrorCode::invalid_parameter,
          "reduced parameter vector has wrong length");
  require(n >= 0 && n < buses, ErrorCode::invalid_parameter,
          "controller index out of range");
  Vec th(dim);
  th.head(n) = theta_minus.head(n);
  th(n) = g_own;
  th.tail(dim - n - 1) = theta_minus.tail(dim - n - 1);
  return th;
}

/// Removes the controller's own capacity entry from a full vector.
inline Vec drop_own_capacity(const Vec& theta_full, int n) {
  const Index dim = theta_full.size();
  require(n >= 0 && static_cast<Index>(n) < dim, ErrorCode::invalid_parameter,
          "controller index out of range");
  Vec th(dim - 1);
  th.head(n) = theta_full.head(n);
  th.tail(dim - n - 1) = theta_full.tail(dim - n - 1);
  return th;
}

/// Non-negative projection applied when estimates are reported or acted on;
/// the iteration itself runs on unclamped values.
inline Vec clamp_reported(const Vec& theta) { return theta.cwiseMax(0.0); }

/**
 * Closed-form initial estimate: with voltages fixed at the measurements, the
 * balance residual is linear in the parameters, and the controller's known
 * capacity column moves to the right-hand side. Solved by thresholded
 * least squares; a rank-deficient system means the probing sequence did not
 * excite every parameter direction.
 */
inline Vec init_estimate(const Mat& w_local, const Mat& x_bar, const Mat& s_bar,
                         int n, double g_own, double rated_x) {
  const int buses = static_cast<int>(w_local.cols());
  const Index dim = theta_dim(buses);
  const Mat ups =
      jacobian_theta(w_local, x_bar, s_bar, all_vsc(buses), rated_x);
  Mat reduced(ups.rows(), dim - 1);
  reduced.leftCols(n) = ups.leftCols(n);
  reduced.rightCols(dim - n - 1) = ups.rightCols(dim - n - 1);
  // Column norms span several orders of magnitude across parameter classes,
  // so equilibrate before factoring; the solution is rescaled afterwards.
  Vec scale(reduced.cols());
  for (Index c = 0; c < reduced.cols(); ++c) {
    const double norm = reduced.col(c).norm();
    scale(c) = norm > 0.0 ? norm : 1.0;
    reduced.col(c) /= scale(c);
  }
  Eigen::JacobiSVD<Mat> svd(reduced,
                            Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-10);
  require(svd.rank() == reduced.cols(), ErrorCode::insufficient_excitation,
          "probing did not excite every unknown parameter direction");
  return svd.solve(-ups.col(n) * g_own).cwiseQuotient(scale);
}

/// One constrained-least-squares update of the reduced parameters and slot
/// voltages.
struct JsiseStep {
  Vec theta_minus;
  Mat v;
};

inline JsiseStep jsise_step(const Vec& theta_minus, const Mat& v,
                            const Mat& w_local, const Mat& x_bar,
                            const Mat& s_bar, const Vec& sigma_diag, int n,
                            double g_own, double rated_x) {
  const int buses = static_cast<int>(w_local.cols());
  const int tb = static_cast<int>(w_local.rows());
  const Index dim = theta_dim(buses);
  require(sigma_diag.size() == static_cast<Index>(buses) * tb,
          ErrorCode::invalid_parameter, "covariance diagonal length mismatch");

  const Vec theta_full = insert_own_capacity(theta_minus, n, g_own, buses);
  const GridParameters params = unpack_theta(theta_full, buses);
  const Modes modes = all_vsc(buses);
  const detail::SlotContext c(params, modes, rated_x, /*checked=*/false);
  const Vec zeta = Vec::Ones(buses);

  // The voltage Jacobian is block diagonal over slots and the covariance is
  // diagonal, so the multiplier system factors slot by slot. Eliminating the
  // voltages and multipliers leaves a plain least-squares problem in the
  // parameters with per-slot rows whitened by the Cholesky factor of
  // gam D gam^T; solving it by QR keeps the error proportional to the
  // condition number itself (normal equations would square it).
  std::vector<Mat> gammas(static_cast<std::size_t>(tb));
  std::vector<Mat> upsilons(static_cast<std::size_t>(tb));
  std::vector<Vec> weights(static_cast<std::size_t>(tb));
  std::vector<Eigen::LLT<Mat>> factors;
  factors.reserve(static_cast<std::size_t>(tb));

  Mat stacked(static_cast<Index>(tb) * buses, dim);
  Vec stacked_rhs(static_cast<Index>(tb) * buses);
  for (int b = 0; b < tb; ++b) {
    const Vec vb = v.row(b).transpose();
    const Vec xb = x_bar.row(b).transpose();
    const Vec sb = s_bar.row(b).transpose();
    Mat gam = detail::slot_jacobian_v(c, vb, xb, sb);
    Mat ups = detail::slot_jacobian_theta(vb, xb, sb, zeta, rated_x);
    Vec d(buses);
    for (int m = 0; m < buses; ++m)
      d(m) = sigma_diag(static_cast<Index>(m) * tb + b);
    factors.emplace_back(Mat(gam * d.asDiagonal() * gam.transpose()));
    const auto& llt = factors.back();
    require(llt.info() == Eigen::Success, ErrorCode::non_convergence,
            "slot multiplier system is not positive definite");
    const Vec rb = w_local.row(b).transpose() - vb;
    const Index row0 = static_cast<Index>(b) * buses;
    stacked.middleRows(row0, buses) = llt.matrixL().solve(ups);
    stacked_rhs.segment(row0, buses) = llt.matrixL().solve(Vec(gam * rb));
    gammas[static_cast<std::size_t>(b)] = std::move(gam);
    upsilons[static_cast<std::size_t>(b)] = std::move(ups);
    weights[static_cast<std::size_t>(b)] = std::move(d);
  }

  // The known-capacity column moves to the right-hand side; the remaining
  // columns are equilibrated before the factorization.
  Mat a(stacked.rows(), dim - 1);
  a.leftCols(n) = stacked.leftCols(n);
  a.rightCols(dim - n - 1) = stacked.rightCols(dim - n - 1);
  const Vec b_rhs = -(stacked.col(n) * g_own + stacked_rhs);
  Vec scale(a.cols());
  for (Index col = 0; col < a.cols(); ++col) {
    const double norm = a.col(col).norm();
    scale(col) = norm > 0.0 ? norm : 1.0;
    a.col(col) /= scale(col);
  }
  JsiseStep out;
  out.theta_minus =
      Vec(a.colPivHouseholderQr().solve(b_rhs)).cwiseQuotient(scale);

  const Vec theta_next = insert_own_capacity(out.theta_minus, n, g_own, buses);
  out.v.resize(tb, buses);
  for (int b = 0; b < tb; ++b) {
    const std::size_t sb = static_cast<std::size_t>(b);
    const Vec rb = w_local.row(b).transpose() - v.row(b).transpose();
    const Vec lambda =
        factors[sb].solve(Vec(upsilons[sb] * theta_next + gammas[sb] * rb));
    out.v.row(b) =
        (w_local.row(b).transpose() -
         Vec(weights[sb].asDiagonal() * (gammas[sb].transpose() * lambda)))
            .transpose();
  }
  return out;
}

/// Estimator output: reduced parameters, recovered voltages, diagnostics.
struct EstimationResult {
  Vec theta_minus;
  Mat v_hat;
  int iterations = 0;
  bool converged = false;
  double final_residual_inf = 0.0;
  std::vector<double> step_norms;
};

/// Raised when the iteration limit is hit; carries the best iterate seen.
class MaxIterExceeded : public Error {
 public:
  explicit MaxIterExceeded(EstimationResult b)
      : Error(ErrorCode::max_iter_exceeded,
              "estimator hit the iteration limit before converging"),
        best(std::move(b)) {}

  EstimationResult best;
};

struct JsiseOptions {
  double eps_scale = 1e-6;  ///< tolerance is eps_scale * (1 + |initial point|)
  int max_iterations = 100;
};

namespace detail {

inline double residual_inf_unchecked(const Mat& v, const Mat& x_bar,
                                     const Mat& s_bar, const Vec& theta_full,
                                     double rated_x) {
  const int buses = static_cast<int>(v.cols());
  const GridParameters params = unpack_theta(theta_full, buses);
  const SlotContext c(params, all_vsc(buses), rated_x, /*checked=*/false);
  double worst = 0.0;
  for (Index b = 0; b < v.rows(); ++b) {
    const double e = slot_residual(c, v.row(b).transpose(),
                                   x_bar.row(b).transpose(),
                                   s_bar.row(b).transpose())
                         .lpNorm<Eigen::Infinity>();
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace detail

/**
 * Full estimation loop: linear initialization, then constrained updates
 * until the joint parameter-and-voltage iterate moves less than
 * eps_scale * (1 + its initial norm). The covariance is built once by the
 * caller and stays fixed across iterations. Throws MaxIterExceeded (with the
 * lowest-residual iterate attached) when the limit is reached.
 */
inline EstimationResult run_jsise(const Mat& w_local, const Mat& x_bar,
                                  const Mat& s_bar, const Vec& sigma_diag,
                                  int n, double g_own, double rated_x,
                                  const JsiseOptions& opt = JsiseOptions{}) {
  EstimationResult cur;
  cur.theta_minus = init_estimate(w_local, x_bar, s_bar, n, g_own, rated_x);
  cur.v_hat = w_local;
  const double start_norm =
      std::sqrt(cur.theta_minus.squaredNorm() + cur.v_hat.squaredNorm());
  const double eps = opt.eps_scale * (1.0 + start_norm);
  const int buses = static_cast<int>(w_local.cols());

  EstimationResult best = cur;
  double best_res = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iterations; ++it) {
    const JsiseStep next =
        jsise_step(cur.theta_minus, cur.v_hat, w_local, x_bar, s_bar,
                   sigma_diag, n, g_own, rated_x);
    const double moved =
        std::sqrt((next.theta_minus - cur.theta_minus).squaredNorm() +
                  (next.v - cur.v_hat).squaredNorm());
    cur.theta_minus = next.theta_minus;
    cur.v_hat = next.v;
    cur.iterations = it;
    cur.step_norms.push_back(moved);
    cur.final_residual_inf = detail::residual_inf_unchecked(
        cur.v_hat, x_bar, s_bar,
        insert_own_capacity(cur.theta_minus, n, g_own, buses), rated_x);
    if (cur.final_residual_inf < best_res) {
      best_res = cur.final_residual_inf;
      best = cur;
    }
    if (moved <= eps) {
      cur.converged = true;
      return cur;
    }
  }
  best.converged = false;
  throw MaxIterExceeded(std::move(best));
}

}  // namespace mgrid
