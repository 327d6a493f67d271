#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>

#include "mgrid/csvio.hpp"
#include "mgrid/scenario.hpp"
#include "mgrid/version.hpp"

using namespace mgrid;

namespace {

bool throws_config_error(const std::string& text) {
  try {
    scenario_from_text(text);
  } catch (const Error& e) {
    return e.code() == ErrorCode::config_error;
  }
  return false;
}

}  // namespace

TEST_CASE("the shipped reference configuration parses with its stated values") {
  const Scenario s =
      load_scenario(std::string(MGRID_SOURCE_DIR) + "/configs/six_bus_reference.cfg");
  CHECK(s.buses == 6);
  CHECK(s.topology_name == "line");
  CHECK(s.controller == 0);
  CHECK(s.t_slots == 600);
  CHECK_THAT(s.tau, Catch::Matchers::WithinRel(50e-3, 1e-12));
  CHECK(s.sqrt_pi == 10.0);
  CHECK(s.env.x == 400.0);
  CHECK(s.env.v_min == 385.0);
  CHECK(s.env.v_max == 415.0);
  CHECK(s.env.dv == 15.0);
  CHECK(s.plan_options.x_tilde == 400.0);
  CHECK(s.plan_options.dv_tilde == 15.0);
  CHECK(s.plan_options.sigma_s == 0.1);
  CHECK(s.plan_options.phi_s == 50e3);
  CHECK_THAT(s.plan_options.tau_transit, Catch::Matchers::WithinRel(2.5e-3, 1e-12));
  CHECK((s.theta.g.array() == 1000.0).all());
  CHECK((s.theta.d_ca.array() == 200.0).all());
  CHECK((s.theta.d_cc.array() == 200.0).all());
  CHECK((s.theta.d_cp.array() == 0.0).all());
  // A line feeder has five unit lines out of fifteen bus pairs.
  CHECK(s.theta.psi.size() == 15);
  CHECK(s.theta.psi.sum() == 5.0);
  CHECK((s.theta.psi.array() != 0.0).count() == 5);
  CHECK(s.cost.a.isApprox((Vec(6) << 3, 3, 5, 5, 8, 11).finished()));
  CHECK(s.cost.c_extra_source == 12.0);
  CHECK(s.cost.c_extra_storage == 12.0);
  CHECK(s.cost.xi == 6.25e-4);
  CHECK(s.cost.tau_oed == 300.0);
  CHECK(s.cost.q == 0.0);
  CHECK(s.sweep_sqrt_pi == std::vector<double>{2, 5, 8, 11, 14});
  CHECK(s.sweep_tau_ms == std::vector<double>{5, 10, 13, 25, 50});
  CHECK(s.trials == 100);
  CHECK(s.seed == 1);
  CHECK(s.out_dir.empty());
  CHECK(s.hash.size() == 16);
}

TEST_CASE("a scenario naming only the bus count fills every default") {
  const Scenario s = scenario_from_text("buses = 4\n");
  CHECK(s.buses == 4);
  CHECK(s.topology_name == "line");
  CHECK(s.t_slots == 600);
  CHECK_THAT(s.tau, Catch::Matchers::WithinRel(50e-3, 1e-12));
  CHECK(s.sqrt_pi == 10.0);
  CHECK(s.controller == 0);
  CHECK((s.theta.g.array() == 1000.0).all());
  CHECK((s.theta.d_ca.array() == 200.0).all());
  CHECK((s.theta.d_cc.array() == 200.0).all());
  CHECK((s.theta.d_cp.array() == 0.0).all());
  CHECK(s.theta.psi.sum() == 3.0);
  // Unit costs repeat the reference pattern, so four buses pair up as 3,3,5,5.
  CHECK(s.cost.a.isApprox((Vec(4) << 3, 3, 5, 5).finished()));
  CHECK(s.cost.backup_capacity == 0.0);
  CHECK(s.trials == 100);
  CHECK(s.seed == 1);
  CHECK(s.sweep_sqrt_pi.size() == 5);
  CHECK(s.sweep_tau_ms.size() == 5);
}

TEST_CASE("trials, seed, and output directory keys are honoured") {
  const Scenario s = scenario_from_text(
      "buses = 2\ntrials = 7\nseed = 12\nout_dir = results/run1\n");
  CHECK(s.trials == 7);
  CHECK(s.seed == 12);
  CHECK(s.out_dir == "results/run1");
}

TEST_CASE("the cut-ring topology names the same feeder as the line") {
  const Scenario a = scenario_from_text("buses = 5\ntopology = cut-ring\n");
  const Scenario b = scenario_from_text("buses = 5\ntopology = line\n");
  CHECK(a.topology().edges == b.topology().edges);
}

TEST_CASE("misconfigured scenarios are rejected rather than defaulted") {
  CHECK(throws_config_error("t_slots = 600\n"));             // buses missing
  CHECK(throws_config_error("buses = 1\n"));                 // too few buses
  CHECK(throws_config_error("buses = 4\nt_slot = 10\n"));    // unknown key
  CHECK(throws_config_error("buses = 4\nbuses = 4\n"));      // duplicate key
  CHECK(throws_config_error("buses = 4\ntau_ms = fast\n"));  // not a number
  CHECK(throws_config_error("buses = 4\nt_slots = 10.5\n"));
  CHECK(throws_config_error("buses = 4\njust some words\n"));
  CHECK(throws_config_error("buses = 4\ng =\n"));
  CHECK(throws_config_error("buses = 4\ng = 1, 2, 3\n"));
  CHECK(throws_config_error("buses = 4\ng = 1, -2, 3, 4\n"));
  CHECK(throws_config_error("buses = 4\ncontroller = 0\n"));
  CHECK(throws_config_error("buses = 4\ncontroller = 5\n"));
  CHECK(throws_config_error("buses = 4\ntopology = star\n"));
  CHECK(throws_config_error("buses = 4\npsi_edges = 1, 1\n"));
  CHECK(throws_config_error("buses = 4\ntrials = 1\n"));
  CHECK(throws_config_error("buses = 4\nseed = -3\n"));
  CHECK(throws_config_error("buses = 4\nseed = 1.5\n"));
  CHECK(throws_config_error("buses = 4\nv_min = 420\n"));
  CHECK(throws_config_error("buses = 4\ncost_a = 3, 5\n"));
  CHECK_FALSE(throws_config_error("buses = 4\n"));
}

TEST_CASE("comments and spacing do not change the parsed scenario") {
  const Scenario a = scenario_from_text(
      "# leading comment\n\n  buses=3   # trailing comment\n\tsqrt_pi =  8\n");
  CHECK(a.buses == 3);
  CHECK(a.sqrt_pi == 8.0);
}

TEST_CASE("the content fingerprint is stable and byte-sensitive") {
  const std::string text = "buses = 6\nsqrt_pi = 10\n";
  const Scenario a = scenario_from_text(text);
  const Scenario b = scenario_from_text(text);
  const Scenario c = scenario_from_text("buses = 6\nsqrt_pi = 11\n");
  CHECK(a.hash == b.hash);
  CHECK(a.hash != c.hash);
  CHECK(a.hash.find_first_not_of("0123456789abcdef") == std::string::npos);
  CHECK(a.source_text == text);
}

TEST_CASE("loading a scenario from disk matches parsing its text") {
  const std::string path = "scenario_roundtrip_tmp.cfg";
  const std::string text = "buses = 2\ntrials = 3\n";
  {
    std::ofstream f(path, std::ios::binary);
    f << text;
  }
  const Scenario s = load_scenario(path);
  CHECK(s.buses == 2);
  CHECK(s.trials == 3);
  CHECK(s.hash == scenario_from_text(text).hash);
  std::remove(path.c_str());

  try {
    load_scenario("definitely_not_a_real_file.cfg");
    FAIL("missing file must be rejected");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config_error);
  }
}

TEST_CASE("tables serialize with quoting, CRLF records, and a footer") {
  ResultTable t({"plain", "with,comma", "with\"quote"}, {"-", "V", "-"});
  t.add_row({"a", "b,c", "d\"e"});
  t.scenario_hash = "cafe";
  t.seed = 9;
  const std::string expect =
      "plain,\"with,comma\",\"with\"\"quote\"\r\n"
      "-,V,-\r\n"
      "a,\"b,c\",\"d\"\"e\"\r\n"
      "# scenario=cafe seed=9 version=" + std::string(kVersion) + "\r\n";
  CHECK(t.to_csv() == expect);
}

TEST_CASE("embedded newlines stay inside one quoted field") {
  ResultTable t({"c"}, {"-"});
  t.add_row({"two\nlines"});
  t.scenario_hash = "00";
  const std::string body = t.to_csv();
  CHECK(body.find("\"two\nlines\"") != std::string::npos);
}

TEST_CASE("malformed tables are rejected") {
  CHECK_THROWS_AS(ResultTable({"a", "b"}, {"-"}), Error);
  CHECK_THROWS_AS(ResultTable({}, {}), Error);
  ResultTable t({"a", "b"}, {"-", "-"});
  CHECK_THROWS_AS(t.add_row({"only one"}), Error);
}

TEST_CASE("numeric fields format identically everywhere") {
  CHECK(ResultTable::field(400.0) == "400");
  CHECK(ResultTable::field(1.0 / 3.0) == "0.333333333333");
  CHECK(ResultTable::field(2.5e-13) == "2.5e-13");
  CHECK(ResultTable::field(1e100) == "1e+100");
  CHECK(ResultTable::field(-0.25) == "-0.25");
  CHECK(ResultTable::field(Index{7}) == "7");
  CHECK(ResultTable::field(42) == "42");
}
