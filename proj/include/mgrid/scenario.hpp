#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/dispatch.hpp"
#include "mgrid/grid.hpp"
#include "mgrid/training.hpp"

/**
 * Plain-text scenario files: one `key = value` per line, `#` comments,
 * vector values as comma lists. Every key has a reference default except
 * `buses`, which is required; unknown keys are rejected so typos cannot
 * silently fall back to defaults.
 */
namespace mgrid {

struct Scenario {
  int buses = 0;
  std::string topology_name = "line";
  int t_slots = 600;
  double tau = 50e-3;        ///< slot duration (s)
  double sqrt_pi = 10.0;     ///< probing amplitude (V)
  int controller = 0;        ///< estimating unit, zero-based
  RatedEnvelope env;
  PlanOptions plan_options;
  GridParameters theta;
  CostModel cost;
  double g_max = 1000.0;     ///< draw ceilings for randomized studies (W)
  double d_ca_max = 200.0;
  double d_cc_max = 200.0;
  double d_cp_max = 0.0;
  std::vector<double> sweep_sqrt_pi = {2.0, 5.0, 8.0, 11.0, 14.0};
  std::vector<double> sweep_tau_ms = {5.0, 10.0, 13.0, 25.0, 50.0};
  int trials = 100;          ///< Monte Carlo trials unless the CLI overrides
  uint64_t seed = 1;         ///< master seed unless the CLI overrides
  std::string out_dir;       ///< default output directory
  std::string hash;          ///< content fingerprint for provenance
  std::string source_text;

  Topology topology() const {
    if (topology_name == "line" || topology_name == "cut-ring")
      return Topology::line(buses);
    if (topology_name == "ring") return Topology::ring(buses);
    if (topology_name == "complete") return Topology::complete(buses);
    fail(ErrorCode::config_error, "unknown topology: " + topology_name);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  require(end == v.c_str() + v.size() && !v.empty(), ErrorCode::config_error,
          "value of '" + key + "' is not a number: " + v);
  return x;
}

inline int parse_int(const std::string& key, const std::string& v) {
  const double x = parse_double(key, v);
  const int i = static_cast<int>(x);
  require(static_cast<double>(i) == x, ErrorCode::config_error,
          "value of '" + key + "' is not an integer: " + v);
  return i;
}

inline std::vector<double> parse_list(const std::string& key,
                                      const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_double(key, trim(item)));
  }
  require(!out.empty(), ErrorCode::config_error,
          "value of '" + key + "' is an empty list");
  return out;
}

inline Vec to_vec(const std::vector<double>& v) {
  Vec out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out(static_cast<Index>(i)) = v[i];
  return out;
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

/// Reference unit-cost pattern, repeated cyclically for other bus counts;
/// truncation keeps tied costs adjacent (3,3 then 5,5).
inline Vec default_costs(int buses) {
  static const double ordered[6] = {3.0, 3.0, 5.0, 5.0, 8.0, 11.0};
  Vec a(buses);
  for (int n = 0; n < buses; ++n) a(n) = ordered[n % 6];
  return a;
}

}  // namespace detail

/// Parses scenario text. Unknown keys and malformed values raise
/// configuration errors; so do physically inadmissible parameters.
inline Scenario scenario_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::config_error,
            "line " + std::to_string(line_no) + " is not 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    require(!key.empty() && !val.empty(), ErrorCode::config_error,
            "line " + std::to_string(line_no) + " has an empty key or value");
    require(kv.emplace(key, val).second, ErrorCode::config_error,
            "duplicate key: " + key);
  }

  auto take = [&kv](const char* key) {
    std::string out;
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = it->second;
      kv.erase(it);
    }
    return out;
  };
  auto num = [&take](const char* key, double fallback) {
    const std::string v = take(key);
    return v.empty() ? fallback : detail::parse_double(key, v);
  };
  auto integer = [&take](const char* key, int fallback) {
    const std::string v = take(key);
    return v.empty() ? fallback : detail::parse_int(key, v);
  };
  auto list = [&take](const char* key) {
    const std::string v = take(key);
    return v.empty() ? std::vector<double>{} : detail::parse_list(key, v);
  };

  Scenario s;
  {
    const std::string v = take("buses");
    require(!v.empty(), ErrorCode::config_error,
            "'buses' is required in every scenario");
    s.buses = detail::parse_int("buses", v);
    require(s.buses >= 2, ErrorCode::config_error,
            "'buses' must be at least 2");
  }
  {
    const std::string v = take("topology");
    if (!v.empty()) s.topology_name = v;
  }
  s.t_slots = integer("t_slots", 600);
  s.tau = num("tau_ms", 50.0) * 1e-3;
  s.sqrt_pi = num("sqrt_pi", 10.0);
  {
    const int c = integer("controller", 1);
    require(c >= 1 && c <= s.buses, ErrorCode::config_error,
            "'controller' must name a bus between 1 and the bus count");
    s.controller = c - 1;
  }
  s.env.x = num("rated_x", 400.0);
  s.env.v_min = num("v_min", 385.0);
  s.env.v_max = num("v_max", 415.0);
  s.env.dv = num("dv", 15.0);
  s.plan_options.x_tilde = num("x_tilde", 400.0);
  s.plan_options.dv_tilde = num("dv_tilde", 15.0);
  s.plan_options.dv = s.env.dv;
  s.plan_options.sigma_s = num("sigma_s", 0.1);
  s.plan_options.phi_s = num("phi_s_hz", 50e3);
  s.plan_options.tau_transit = num("tau_transit_ms", 2.5) * 1e-3;
  s.plan_options.kappa_alpha = num("kappa_alpha", 1.0);
  s.plan_options.kappa_beta = num("kappa_beta", 1.0);

  auto bus_vector = [&](const char* key, double fallback) {
    const std::vector<double> v = list(key);
    if (v.empty()) return Vec(Vec::Constant(s.buses, fallback));
    require(static_cast<int>(v.size()) == s.buses, ErrorCode::config_error,
            std::string("'") + key + "' must list one value per bus");
    return detail::to_vec(v);
  };
  s.theta.g = bus_vector("g", 1000.0);
  s.theta.d_ca = bus_vector("d_ca", 200.0);
  s.theta.d_cc = bus_vector("d_cc", 200.0);
  s.theta.d_cp = bus_vector("d_cp", 0.0);
  auto reject_negative = [](const char* key, const Vec& v) {
    require((v.array() >= 0.0).all(), ErrorCode::config_error,
            std::string("'") + key + "' entries must be non-negative");
  };
  reject_negative("g", s.theta.g);
  reject_negative("d_ca", s.theta.d_ca);
  reject_negative("d_cc", s.theta.d_cc);
  reject_negative("d_cp", s.theta.d_cp);

  const Topology topo = s.topology();
  {
    const std::vector<double> v = list("psi_edges");
    Vec edges = v.empty() ? Vec(Vec::Ones(static_cast<Index>(topo.edges.size())))
                          : detail::to_vec(v);
    require(edges.size() == static_cast<Index>(topo.edges.size()),
            ErrorCode::config_error,
            "'psi_edges' must list one conductance per topology edge");
    reject_negative("psi_edges", edges);
    s.theta = GridParameters::from_sparse(topo, s.theta.g, s.theta.d_ca,
                                          s.theta.d_cc, s.theta.d_cp, edges);
  }

  {
    const std::vector<double> v = list("cost_a");
    s.cost.a = v.empty() ? detail::default_costs(s.buses) : detail::to_vec(v);
    require(s.cost.a.size() == s.buses, ErrorCode::config_error,
            "'cost_a' must list one cost per bus");
  }
  s.cost.c_extra_source = num("c_extra_source", 12.0);
  s.cost.c_extra_storage = num("c_extra_storage", 12.0);
  s.cost.q = num("q", 0.0);
  s.cost.xi = num("xi", 6.25e-4);
  s.cost.tau_oed = num("tau_oed_s", 300.0);
  s.cost.backup_capacity = num("backup_capacity", 0.0);

  s.g_max = num("g_max", 1000.0);
  s.d_ca_max = num("d_ca_max", 200.0);
  s.d_cc_max = num("d_cc_max", 200.0);
  s.d_cp_max = num("d_cp_max", 0.0);
  {
    const std::vector<double> v = list("sweep_sqrt_pi");
    if (!v.empty()) s.sweep_sqrt_pi = v;
  }
  {
    const std::vector<double> v = list("sweep_tau_ms");
    if (!v.empty()) s.sweep_tau_ms = v;
  }
  s.trials = integer("trials", 100);
  require(s.trials >= 2, ErrorCode::config_error,
          "'trials' must be at least 2");
  {
    const int v = integer("seed", 1);
    require(v >= 0, ErrorCode::config_error, "'seed' must be non-negative");
    s.seed = static_cast<uint64_t>(v);
  }
  s.out_dir = take("out_dir");

  if (!kv.empty()) {
    fail(ErrorCode::config_error,
         "unknown configuration key: " + kv.begin()->first);
  }

  try {
    s.env.validate();
    s.cost.validate(s.buses);
  } catch (const Error& e) {
    fail(ErrorCode::config_error, e.what());
  }
  s.source_text = text;
  s.hash = detail::hex64(detail::fnv1a64(text));
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::config_error,
          "cannot open scenario file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return scenario_from_text(buf.str());
}

}  // namespace mgrid
