#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "mgrid/common.hpp"

/**
 * Domain types for a multi-bus droop-controlled DC microgrid: network
 * topology, generation/load parameters, droop settings, and the packing of
 * all identifiable quantities into a single parameter vector.
 */
namespace mgrid {

/// Unordered bus pair, always stored with first < second (0-based indices).
using Edge = std::pair<int, int>;

/**
 * Bus-and-line connectivity. Edges are undirected; the incidence matrix
 * orients each edge from its lower to its higher bus index.
 */
struct Topology {
  int bus_count = 0;
  std::vector<Edge> edges;

  Topology() = default;

  Topology(int n, std::vector<Edge> e) : bus_count(n), edges(std::move(e)) {
    require(bus_count >= 1, ErrorCode::invalid_topology,
            "bus_count must be positive");
    std::set<Edge> seen;
    for (auto& ed : edges) {
      if (ed.first > ed.second) std::swap(ed.first, ed.second);
      require(ed.first != ed.second, ErrorCode::invalid_topology,
              "self-loop edge");
      require(ed.first >= 0 && ed.second < bus_count,
              ErrorCode::invalid_topology, "edge endpoint out of range");
      require(seen.insert(ed).second, ErrorCode::invalid_topology,
              "duplicate edge");
    }
  }

  /// Line topology: bus k connected to k+1.
  static Topology line(int n) {
    std::vector<Edge> e;
    for (int k = 0; k + 1 < n; ++k) e.push_back({k, k + 1});
    return Topology(n, std::move(e));
  }

  /// Ring topology: line plus the closing edge (n-1, 0).
  static Topology ring(int n) {
    Topology t = line(n);
    if (n > 2) t.edges.push_back({0, n - 1});
    return t;
  }

  /// Fully connected graph on n buses.
  static Topology complete(int n) {
    std::vector<Edge> e;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) e.push_back({i, j});
    return Topology(n, std::move(e));
  }

  /// Oriented incidence matrix: one column per edge, +1 at the lower bus.
  Mat incidence() const {
    Mat a = Mat::Zero(bus_count, static_cast<Index>(edges.size()));
    for (std::size_t k = 0; k < edges.size(); ++k) {
      a(edges[k].first, static_cast<Index>(k)) = 1.0;
      a(edges[k].second, static_cast<Index>(k)) = -1.0;
    }
    return a;
  }
};

/// Number of unordered bus pairs for an N-bus grid.
inline Index pair_count(int n) {
  return static_cast<Index>(n) * (n - 1) / 2;
}

/**
 * Index of pair (i,j), i<j, in the row-major supra-diagonal enumeration
 * (0,1), (0,2), ..., (0,N-1), (1,2), ..., (N-2,N-1).
 */
inline Index pair_index(int i, int j, int n) {
  if (i > j) std::swap(i, j);
  return static_cast<Index>(i) * (2 * n - i - 1) / 2 + (j - i - 1);
}

/**
 * Generation capacities, ZIP demand components, and line conductances.
 *
 * psi always stores the full supra-diagonal vector of length N(N-1)/2;
 * pairs that are not physical lines hold zeros. Estimators treat psi the
 * same way, so sparse topologies need no special casing downstream.
 */
struct GridParameters {
  Vec g;     ///< per-DER generation capacity (W)
  Vec d_ca;  ///< constant-conductance demand at rated voltage (W)
  Vec d_cc;  ///< constant-current demand at rated voltage (W)
  Vec d_cp;  ///< constant-power demand (W)
  Vec psi;   ///< line conductances (S), full supra-diagonal order

  int bus_count() const { return static_cast<int>(g.size()); }

  void validate() const {
    const int n = bus_count();
    require(n >= 1, ErrorCode::invalid_parameter, "empty parameter set");
    require(d_ca.size() == n && d_cc.size() == n && d_cp.size() == n,
            ErrorCode::invalid_parameter, "demand vector length mismatch");
    require(psi.size() == pair_count(n), ErrorCode::invalid_parameter,
            "psi must have length N(N-1)/2");
    auto nonneg = [](const Vec& v) { return (v.array() >= 0.0).all(); };
    require(nonneg(g) && nonneg(d_ca) && nonneg(d_cc) && nonneg(d_cp) &&
                nonneg(psi),
            ErrorCode::invalid_parameter, "negative parameter entry");
  }

  /// Builds full-psi parameters from per-edge conductances on a topology.
  static GridParameters from_sparse(const Topology& topo, const Vec& g,
                                    const Vec& d_ca, const Vec& d_cc,
                                    const Vec& d_cp, const Vec& psi_edges) {
    require(psi_edges.size() == static_cast<Index>(topo.edges.size()),
            ErrorCode::invalid_parameter,
            "per-edge psi length must match edge count");
    GridParameters p;
    p.g = g;
    p.d_ca = d_ca;
    p.d_cc = d_cc;
    p.d_cp = d_cp;
    p.psi = Vec::Zero(pair_count(topo.bus_count));
    for (std::size_t k = 0; k < topo.edges.size(); ++k) {
      const auto& e = topo.edges[k];
      p.psi(pair_index(e.first, e.second, topo.bus_count)) =
          psi_edges(static_cast<Index>(k));
    }
    p.validate();
    return p;
  }
};

/// Rated voltage and the admissible band around it.
struct RatedEnvelope {
  double x = 400.0;      ///< rated voltage (V)
  double v_min = 385.0;  ///< lower margin (V)
  double v_max = 415.0;  ///< upper margin (V)
  double dv = 15.0;      ///< max droop voltage drop (V)

  void validate() const {
    require(v_min < x && x < v_max, ErrorCode::invalid_parameter,
            "rated voltage must lie strictly inside [v_min, v_max]");
    require(dv > 0.0 && dv <= x - v_min, ErrorCode::invalid_parameter,
            "max drop must satisfy 0 < dv <= x - v_min");
  }
};

/// Primary-control operating mode of one converter.
enum class ConverterKind { vsc, csc, off };

/**
 * One converter's primary-control configuration. VSC units regulate voltage
 * by the droop law v = x - i/y_va; CSC units inject the fixed power p; off
 * units neither regulate nor inject.
 */
struct DroopSetting {
  ConverterKind kind = ConverterKind::vsc;
  double x = 400.0;  ///< reference voltage (V), VSC only
  double dv = 15.0;  ///< design voltage drop (V), VSC only
  double s = 0.0;    ///< droop slope (1/V^2), VSC only
  double p = 0.0;    ///< power reference (W), CSC only

  double zeta() const { return kind == ConverterKind::vsc ? 1.0 : 0.0; }
};

/**
 * Droop slope and virtual conductance that make a unit carry its full
 * capacity g exactly when the bus has sagged by dv below the reference.
 * Sizing y_va proportionally to g gives capacity-proportional sharing.
 */
inline std::pair<double, double> droop_from_capacity(double x, double dv,
                                                     double g) {
  require(dv > 0.0 && dv < x, ErrorCode::invalid_parameter,
          "droop drop must satisfy 0 < dv < x");
  require(g >= 0.0, ErrorCode::invalid_parameter, "negative capacity");
  const double s = 1.0 / ((x - dv) * dv);
  return {s, s * g};
}

/**
 * Weighted graph Laplacian Y = A diag(psi) A^T. Accepts psi either per edge
 * (aligned with topology.edges) or as the full supra-diagonal vector.
 */
inline Mat build_conductance_matrix(const Topology& topo, const Vec& psi) {
  const int n = topo.bus_count;
  Mat y = Mat::Zero(n, n);
  auto add_line = [&](int i, int j, double c) {
    require(c >= 0.0, ErrorCode::invalid_parameter, "negative conductance");
    y(i, i) += c;
    y(j, j) += c;
    y(i, j) -= c;
    y(j, i) -= c;
  };
  if (psi.size() == static_cast<Index>(topo.edges.size()) &&
      psi.size() != pair_count(n)) {
    for (std::size_t k = 0; k < topo.edges.size(); ++k)
      add_line(topo.edges[k].first, topo.edges[k].second,
               psi(static_cast<Index>(k)));
  } else if (psi.size() == pair_count(n)) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) add_line(i, j, psi(pair_index(i, j, n)));
  } else {
    fail(ErrorCode::invalid_parameter,
         "psi length matches neither edge count nor full pair count");
  }
  return y;
}

/// Laplacian straight from a full supra-diagonal conductance vector.
inline Mat laplacian_from_full_psi(const Vec& psi, int n) {
  require(psi.size() == pair_count(n), ErrorCode::invalid_parameter,
          "psi must be the full supra-diagonal vector");
  Mat y = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double c = psi(pair_index(i, j, n));
      y(i, i) += c;
      y(j, j) += c;
      y(i, j) -= c;
      y(j, i) -= c;
    }
  }
  return y;
}

/// Dimension of the packed parameter vector: 4N demands+capacities plus
/// N(N-1)/2 conductances, i.e. N(N+7)/2.
inline Index theta_dim(int n) { return pair_count(n) + 4 * n; }

/// Packs [g; d_ca; d_cc; d_cp; psi] into one vector.
inline Vec pack_theta(const GridParameters& p) {
  p.validate();
  const int n = p.bus_count();
  Vec th(theta_dim(n));
  th.segment(0, n) = p.g;
  th.segment(n, n) = p.d_ca;
  th.segment(2 * n, n) = p.d_cc;
  th.segment(3 * n, n) = p.d_cp;
  th.segment(4 * n, pair_count(n)) = p.psi;
  return th;
}

/// Inverse of pack_theta.
inline GridParameters unpack_theta(const Vec& theta, int n) {
  require(theta.size() == theta_dim(n), ErrorCode::invalid_parameter,
          "theta length does not match N(N+7)/2");
  GridParameters p;
  p.g = theta.segment(0, n);
  p.d_ca = theta.segment(n, n);
  p.d_cc = theta.segment(2 * n, n);
  p.d_cp = theta.segment(3 * n, n);
  p.psi = theta.segment(4 * n, pair_count(n));
  return p;
}

/**
 * Small-signal constant-power load equivalents around an operating voltage.
 * Documented helper only; the power-balance residual works with the exact
 * constant-power term instead, so nothing in the solvers calls this.
 */
inline std::pair<double, double> cp_small_signal(double d_cp, double v) {
  require(v != 0.0, ErrorCode::invalid_parameter,
          "operating voltage must be nonzero");
  const double i_cp = 2.0 * d_cp / v;
  const double y_cp = -d_cp / (v * v);
  return {i_cp, y_cp};
}

}  // namespace mgrid
