#pragma once

#include <cmath>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/estimator.hpp"
#include "mgrid/grid.hpp"
#include "mgrid/steady_state.hpp"

/**
 * Estimation-error lower bounds for the joint parameter-and-voltage problem.
 *
 * The measurement model is w = vec(V) + noise with diagonal covariance; the
 * power balance pins (theta_minus, V) to a manifold. Two equivalent bounds
 * are provided: a null-space form that needs no invertibility assumptions,
 * and a closed form that exploits the nonsingular voltage Jacobian. Both are
 * evaluated at a linearization point supplied by the caller (typically the
 * truth, for benchmarking Monte Carlo runs).
 */
namespace mgrid {

/// Position of a full-parameter index inside the reduced vector.
inline Index reduced_index(Index full, int n) {
  require(full != static_cast<Index>(n), ErrorCode::invalid_parameter,
          "own capacity entry is not part of the reduced vector");
  return full < static_cast<Index>(n) ? full : full - 1;
}

/// Reduced-vector positions of the other units' capacities.
inline std::vector<Index> capacity_indices_reduced(int n, int buses) {
  std::vector<Index> idx;
  for (int m = 0; m < buses; ++m)
    if (m != n) idx.push_back(reduced_index(m, n));
  return idx;
}

/// Reduced-vector positions of one demand class (0 = conductance,
/// 1 = current, 2 = power) for every bus.
inline std::vector<Index> demand_indices_reduced(int klass, int n, int buses) {
  require(klass >= 0 && klass < 3, ErrorCode::invalid_parameter,
          "demand class must be 0, 1, or 2");
  std::vector<Index> idx;
  for (int m = 0; m < buses; ++m)
    idx.push_back(reduced_index((klass + 1) * buses + m, n));
  return idx;
}

/// Reduced-vector positions of all line conductances.
inline std::vector<Index> line_indices_reduced(int n, int buses) {
  std::vector<Index> idx;
  for (Index k = 0; k < pair_count(buses); ++k)
    idx.push_back(reduced_index(4 * buses + k, n));
  return idx;
}

/// Extracts a principal submatrix.
inline Mat subset(const Mat& bound, const std::vector<Index>& idx) {
  Mat out(static_cast<Index>(idx.size()), static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j)
      out(static_cast<Index>(i), static_cast<Index>(j)) = bound(idx[i], idx[j]);
  return out;
}

/// Stacked parameter Jacobian with the own-capacity column removed.
inline Mat stack_ups_minus(const Mat& v, const Mat& x_bar, const Mat& s_bar,
                           int n, double rated_x) {
  const int buses = static_cast<int>(v.cols());
  const Index dim = theta_dim(buses);
  const Mat ups = jacobian_theta(v, x_bar, s_bar, all_vsc(buses), rated_x);
  Mat reduced(ups.rows(), dim - 1);
  reduced.leftCols(n) = ups.leftCols(n);
  reduced.rightCols(dim - n - 1) = ups.rightCols(dim - n - 1);
  return reduced;
}

/**
 * Null-space bound on the joint vector (theta_minus, vec(V)). The balance
 * constraint gradient [Ups_minus, Gamma] must have a null space of exactly
 * the reduced parameter dimension; anything larger means the probing left
 * blind directions and no finite bound exists.
 */
inline Mat constrained_crlb(const Mat& ups_minus, const Mat& gamma,
                            const Vec& sigma_diag) {
  const Index rows = ups_minus.rows();
  require(gamma.rows() == rows && gamma.cols() == rows,
          ErrorCode::invalid_parameter, "voltage Jacobian shape mismatch");
  require(sigma_diag.size() == rows, ErrorCode::invalid_parameter,
          "covariance diagonal length mismatch");
  {
    // The route relies on the balance pinning the voltages slot by slot; a
    // singular voltage Jacobian breaks that and the bound would silently
    // stop matching the closed form.
    Eigen::JacobiSVD<Mat> gsvd(gamma);
    const Vec& gs = gsvd.singularValues();
    require(gs(gs.size() - 1) > 1e-10 * gs(0), ErrorCode::insufficient_excitation,
            "voltage Jacobian is singular");
  }
  const Index free_dim = ups_minus.cols();
  Mat grad(rows, free_dim + rows);
  grad.leftCols(free_dim) = ups_minus;
  grad.rightCols(rows) = gamma;
  // Column equilibration keeps the computed null basis accurate across the
  // very different parameter and voltage column scales; the bound itself is
  // invariant to the induced change of basis within the null space.
  Vec scale(grad.cols());
  for (Index col = 0; col < grad.cols(); ++col) {
    const double norm = grad.col(col).norm();
    scale(col) = norm > 0.0 ? norm : 1.0;
    grad.col(col) /= scale(col);
  }

  Eigen::JacobiSVD<Mat> svd(grad, Eigen::ComputeFullV);
  svd.setThreshold(1e-10);
  const Index null_dim = grad.cols() - svd.rank();
  require(null_dim == free_dim, ErrorCode::insufficient_excitation,
          "constraint gradient leaves unconstrained blind directions");
  const Mat basis =
      scale.cwiseInverse().asDiagonal() * svd.matrixV().rightCols(null_dim);

  // Only the voltage rows carry information. With the whitened voltage part
  // of the basis factored as U S V^T, the bound is K K^T for
  // K = basis V S^{-1}, and the voltage rows of K collapse exactly to
  // Sigma^{1/2} U. Assembling K from those pieces keeps every factor well
  // conditioned instead of inverting the projected information directly.
  const Vec half = sigma_diag.cwiseSqrt();
  const Mat whitened =
      half.cwiseInverse().asDiagonal() * basis.bottomRows(rows);
  Eigen::JacobiSVD<Mat> wsvd(whitened, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& ws = wsvd.singularValues();
  require(ws(ws.size() - 1) > 1e-14 * ws(0), ErrorCode::insufficient_excitation,
          "projected information matrix is singular");
  Mat k(free_dim + rows, free_dim);
  k.topRows(free_dim) = basis.topRows(free_dim) * wsvd.matrixV() *
                        ws.cwiseInverse().asDiagonal();
  k.bottomRows(rows) = half.asDiagonal() * wsvd.matrixU();
  return k * k.transpose();
}

/// Closed-form bounds and conditioning diagnostics.
struct ClosedFormBounds {
  Mat theta_block;       ///< reduced-parameter error covariance bound
  Mat v_block;           ///< voltage error covariance bound
  double fim_condition;  ///< spectral condition number of the information
  bool ill_conditioned;  ///< condition above 1e12
};

/**
 * Closed form exploiting the invertible per-slot voltage Jacobian: with
 * C = Gamma^{-1} Ups_minus and B = Sigma^{-1/2} C, the information matrix is
 * B'B and the voltage bound is the congruent projection Sigma^{1/2} U U'
 * Sigma^{1/2} built from B's left singular vectors. All routes go through
 * one SVD so the two public bounds agree to machine precision.
 */
inline ClosedFormBounds closed_form_bounds(const Mat& v, const Mat& x_bar,
                                           const Mat& s_bar,
                                           const GridParameters& theta, int n,
                                           const Vec& sigma_diag,
                                           double rated_x) {
  const int buses = static_cast<int>(v.cols());
  const int tb = static_cast<int>(v.rows());
  const Index dim = theta_dim(buses);
  require(sigma_diag.size() == static_cast<Index>(buses) * tb,
          ErrorCode::invalid_parameter, "covariance diagonal length mismatch");
  const detail::SlotContext c(theta, all_vsc(buses), rated_x);
  const Vec zeta = Vec::Ones(buses);

  Mat white(static_cast<Index>(buses) * tb, dim - 1);
  for (int b = 0; b < tb; ++b) {
    const Vec vb = v.row(b).transpose();
    const Vec xb = x_bar.row(b).transpose();
    const Vec sb = s_bar.row(b).transpose();
    const Mat ups = detail::slot_jacobian_theta(vb, xb, sb, zeta, rated_x);
    Mat ups_minus(buses, dim - 1);
    ups_minus.leftCols(n) = ups.leftCols(n);
    ups_minus.rightCols(dim - n - 1) = ups.rightCols(dim - n - 1);
    const Mat gam = detail::slot_jacobian_v(c, vb, xb, sb);
    const Mat solved = gam.partialPivLu().solve(ups_minus);
    for (int m = 0; m < buses; ++m)
      white.row(static_cast<Index>(m) * tb + b) =
          solved.row(m) / std::sqrt(sigma_diag(static_cast<Index>(m) * tb + b));
  }

  ClosedFormBounds out;
  {
    // The conditioning diagnostic describes the raw information matrix, the
    // object the bound inverts, so it is taken before any rescaling.
    Eigen::JacobiSVD<Mat> raw(white);
    const Vec& rs = raw.singularValues();
    require(rs(rs.size() - 1) > 0.0, ErrorCode::insufficient_excitation,
            "information matrix is singular");
    const double ratio = rs(0) / rs(rs.size() - 1);
    out.fim_condition = ratio * ratio;
    out.ill_conditioned = out.fim_condition > 1e12;
  }
  // Parameter classes live on very different scales, so the factor is
  // equilibrated column by column before the factorization; the bound
  // transforms exactly under that diagonal change of variables.
  Vec scale(white.cols());
  for (Index col = 0; col < white.cols(); ++col) {
    const double norm = white.col(col).norm();
    scale(col) = norm > 0.0 ? norm : 1.0;
    white.col(col) /= scale(col);
  }
  Eigen::JacobiSVD<Mat> svd(white, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec s = svd.singularValues();
  require(s(s.size() - 1) > 0.0, ErrorCode::insufficient_excitation,
          "information matrix is singular");
  const Mat unscaled_v = scale.cwiseInverse().asDiagonal() * svd.matrixV();
  out.theta_block = unscaled_v * s.array().square().inverse().matrix().asDiagonal() *
                    unscaled_v.transpose();
  const Vec half = sigma_diag.cwiseSqrt();
  out.v_block = half.asDiagonal() * (svd.matrixU() * svd.matrixU().transpose()) *
                half.asDiagonal();
  return out;
}

/// Relative root-mean-square error implied by a bound block.
inline double rrmse_from_bound(const Mat& block, const Vec& truth) {
  require(truth.norm() > 0.0, ErrorCode::invalid_parameter,
          "RRMSE needs a nonzero reference");
  return std::sqrt(block.trace()) / truth.norm();
}

/// Empirical relative RMSE over Monte Carlo estimates (one column per trial).
inline double rrmse_empirical(const Mat& estimates, const Vec& truth) {
  require(estimates.rows() == truth.size() && estimates.cols() > 0,
          ErrorCode::invalid_parameter, "estimate matrix shape mismatch");
  require(truth.norm() > 0.0, ErrorCode::invalid_parameter,
          "RRMSE needs a nonzero reference");
  const double mse =
      (estimates.colwise() - truth).squaredNorm() /
      static_cast<double>(estimates.cols());
  return std::sqrt(mse) / truth.norm();
}

/// Bound on the per-bus total demand (all three classes summed): a linear
/// image of the demand sub-block of the parameter bound.
inline Mat demand_total_bound(const Mat& theta_block, int n, int buses) {
  std::vector<Index> all;
  for (int klass = 0; klass < 3; ++klass)
    for (Index i : demand_indices_reduced(klass, n, buses)) all.push_back(i);
  const Mat cov = subset(theta_block, all);
  Mat p = Mat::Zero(buses, 3 * buses);
  for (int klass = 0; klass < 3; ++klass)
    for (int m = 0; m < buses; ++m) p(m, klass * buses + m) = 1.0;
  return p * cov * p.transpose();
}

/// Counting argument for a controller with no channel: per slot it gains one
/// scalar measurement, while every other bus's voltage in that slot is a
/// fresh unknown on top of the reduced parameters.
struct ObservabilityReport {
  Index unknown_count = 0;
  Index equation_count = 0;
  bool identifiable = false;
};

inline ObservabilityReport local_observability_demo(int buses, int t_slots) {
  require(buses >= 2 && t_slots >= 1, ErrorCode::invalid_parameter,
          "need at least two buses and one slot");
  ObservabilityReport r;
  r.unknown_count = theta_dim(buses) - 1 +
                    static_cast<Index>(buses - 1) * t_slots;
  r.equation_count = t_slots;
  r.identifiable = r.unknown_count <= r.equation_count;
  return r;
}

}  // namespace mgrid
