#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dmpc/config.hpp"
#include "dmpc/models.hpp"

using namespace dmpc;
using nlohmann::json;

namespace {

// minimal document every test mutates from
json base_doc() {
  return json{{"problem", {{"preset", "double_integrator"}, {"T", 2.0}, {"N", 11}}}};
}

bool same_vec(const Vec& a, const Vec& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

void expect_error(const json& doc, const std::string& needle) {
  try {
    parse_config(doc);
    FAIL("parsed without error, expected one mentioning: " << needle);
  } catch (const std::exception& e) {
    const std::string got = e.what();
    CAPTURE(got);
    CHECK(got.find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("presets expand like direct calls") {
  struct Row {
    json doc;
    Problem direct;
  };
  const std::vector<Row> rows = {
      {json{{"problem", {{"preset", "double_integrator"}, {"T", 2.0}, {"N", 21}}}},
       presets::double_integrator(2.0, 21)},
      {json{{"problem",
             {{"preset", "spring_mass_grid"},
              {"preset_params", {{"rows", 2}, {"cols", 3}}},
              {"T", 1.0},
              {"N", 11}}}},
       presets::spring_mass_grid(2, 3, 1.0, 11)},
      {json{{"problem",
             {{"preset", "smart_grid_chain"}, {"preset_params", {{"n_sinks", 2}}}, {"T", 1.5}}}},
       presets::smart_grid_chain(2, 1.5, 11)},
      {json{{"problem",
             {{"preset", "water_tank_chain"}, {"preset_params", {{"n", 4}}}, {"N", 16}}}},
       presets::water_tank_chain(4, 1.0, 16)},
      {json{{"problem",
             {{"preset", "van_der_pol_chain"},
              {"preset_params", {{"n", 3}, {"classical", true}}}}}},
       presets::van_der_pol_chain(3, 1.0, 11, true)}};

  for (const Row& r : rows) {
    CAPTURE(r.doc.dump());
    const RunConfig c = parse_config(r.doc);
    REQUIRE(c.problem.agents.size() == r.direct.agents.size());
    CHECK(c.problem.couplings.size() == r.direct.couplings.size());
    CHECK(c.problem.T == r.direct.T);
    CHECK(c.problem.N == r.direct.N);
    for (size_t i = 0; i < c.problem.agents.size(); ++i) {
      const AgentModel& a = c.problem.agents[i];
      const AgentModel& b = r.direct.agents[i];
      CHECK(a.id == b.id);
      CHECK(a.model_key == b.model_key);
      CHECK(a.params == b.params);
      CHECK(same_vec(a.x0, b.x0));
    }
  }
}

TEST_CASE("explicit agents with convenience keys") {
  const json doc = {
      {"problem",
       {{"T", 1.0},
        {"N", 11},
        {"agents",
         {{{"id", 1},
           {"model", "van_der_pol"},
           {"params", {{"x0", {0.0, 0.0}}}},
           {"x0", {1.0, -0.5}},  // wins over the params entry
           {"R", {0.2}},
           {"u_min", {-2.0}},
           {"u_max", {2.0}}},
          {{"id", 2}, {"model", "van_der_pol"}, {"x_des", {0.5, 0.0}}}}},
        {"couplings",
         {{{"from", 2}, {"to", 1}, {"model", "vdp_link"}},
          {{"from", 1}, {"to", 2}, {"model", "vdp_link"}, {"params", json::object()}}}}}}};

  const RunConfig c = parse_config(doc);
  REQUIRE(c.problem.agents.size() == 2);
  const AgentModel& a1 = c.problem.agent(1);
  CHECK(a1.x0(0) == 1.0);
  CHECK(a1.x0(1) == -0.5);
  CHECK(a1.R(0) == 0.2);
  CHECK(a1.u_min(0) == -2.0);
  CHECK(a1.u_max(0) == 2.0);
  CHECK(c.problem.agent(2).x_des(0) == 0.5);

  REQUIRE(c.problem.couplings.size() == 2);
  CHECK(c.problem.couplings[0].owner == 1);     // term lands in "to"
  CHECK(c.problem.couplings[0].neighbor == 2);  // "from" sends its variables
  const auto nb = c.problem.graph().neighborhood(1);
  REQUIRE(nb.size() == 1);
  CHECK(nb[0] == 2);
}

TEST_CASE("controller, simulation and network sections") {
  json doc = {{"problem",
               {{"preset", "smart_grid_chain"}, {"preset_params", {{"n_sinks", 2}}}}},
              {"controller",
               {{"type", "distributed"},
                {"q_max", 7},
                {"eps", 1e-5},
                {"rho0", 2.5},
                {"convergence_norm", "sup"},
                {"adapt_penalties", true},
                {"gamma_min", 0.8},
                {"gamma_max", 1.5},
                {"adapt_threshold", 1e-9},
                {"rho_min", 1e-3},
                {"rho_max", 1e5},
                {"approximate_cost", true},
                {"approximate_dynamics", true},
                {"approximate_constraints", true},
                {"multi_threading", true},
                {"active", {1, 2}},
                {"solver",
                 {{"max_gradient_iterations", 33},
                  {"max_multiplier_iterations", 2},
                  {"rel_cost_tol", 1e-7},
                  {"integrator", "heun"}}}}},
              {"simulation",
               {{"dt", 0.25},
                {"steps", 8},
                {"plant_substeps", 16},
                {"blowup", 1e6},
                {"events",
                 {{{"t", 1.0}, {"action", "add"}, {"id", 3}},
                  {{"t", 1.5}, {"action", "remove"}, {"id", 3}}}}}},
              {"network",
               {{"coordinator", "127.0.0.1:9000"},
                {"agents", {{"1", "127.0.0.1:9001"}, {"2", "127.0.0.1:9002"}}},
                {"step_timeout_ms", 2500},
                {"plug_and_play", true}}},
              {"seed", 42}};

  const RunConfig c = parse_config(doc);
  CHECK(c.controller == "distributed");
  CHECK(c.q_max == 7);
  CHECK(c.admm.eps == 1e-5);
  CHECK(c.admm.rho0 == 2.5);
  CHECK(c.admm.sup_norm);
  CHECK(c.admm.adapt_penalties);
  CHECK(c.admm.gamma_min == 0.8);
  CHECK(c.admm.gamma_max == 1.5);
  CHECK(c.admm.adapt_threshold == 1e-9);
  CHECK(c.admm.rho_min == 1e-3);
  CHECK(c.admm.rho_max == 1e5);
  CHECK(c.admm.approximate_cost);
  CHECK(c.admm.approximate_dynamics);
  CHECK(c.admm.approximate_constraints);
  CHECK(c.multi_threading);
  CHECK(c.active == std::vector<uint32_t>{1, 2});
  CHECK(c.solver.max_gradient_iterations == 33);
  CHECK(c.solver.max_multiplier_iterations == 2);
  CHECK(c.solver.rel_cost_tol == 1e-7);
  CHECK(c.solver.integrator == Integrator::heun);
  CHECK(c.admm.solver.max_gradient_iterations == 33);  // embedded copy follows

  CHECK(c.sim.dt == 0.25);
  CHECK(c.sim.steps == 8);
  CHECK(c.sim.plant_substeps == 16);
  CHECK(c.sim.blowup == 1e6);
  REQUIRE(c.sim.events.size() == 2);
  CHECK(c.sim.events[0].attach);
  CHECK(c.sim.events[0].id == 3);
  CHECK_FALSE(c.sim.events[1].attach);

  CHECK(c.coordinator_address == "127.0.0.1:9000");
  CHECK(c.agent_addresses.at(1) == "127.0.0.1:9001");
  CHECK(c.agent_addresses.at(2) == "127.0.0.1:9002");
  CHECK(c.step_timeout_ms == 2500);
  CHECK(c.plug_and_play);
  CHECK(c.seed == 42);
}

TEST_CASE("defaults match the option structs") {
  const RunConfig c = parse_config(base_doc());
  const AdmmOptions a;
  CHECK(c.controller == "distributed");
  CHECK(c.q_max == ClusterOptions{}.q_max);
  CHECK(c.admm.eps == a.eps);
  CHECK(c.admm.rho0 == a.rho0);
  CHECK_FALSE(c.admm.sup_norm);
  CHECK_FALSE(c.admm.adapt_penalties);
  CHECK_FALSE(c.multi_threading);
  CHECK(c.active.empty());
  const SolverConfig s;
  CHECK(c.solver.max_gradient_iterations == s.max_gradient_iterations);
  CHECK(c.solver.backtrack == s.backtrack);
  const SimOptions so;
  CHECK(c.sim.dt == so.dt);
  CHECK(c.sim.steps == so.steps);
  CHECK(c.sim.plant_substeps == so.plant_substeps);
  CHECK(c.coordinator_address.empty());
  CHECK(c.step_timeout_ms == 10000);
  CHECK(c.seed == 0);
}

TEST_CASE("bad documents fail with the offending path") {
  json d;

  d = base_doc();
  d["bogus"] = 1;
  expect_error(d, "unknown key \"bogus\"");

  expect_error(json::object(), "missing required key \"problem\"");

  d = base_doc();
  d["problem"]["preset"] = "ring_of_fire";
  expect_error(d, "unknown preset \"ring_of_fire\"");

  d = base_doc();
  d["problem"]["agents"] = json::array();
  expect_error(d, "preset cannot be combined");

  d = base_doc();
  d["problem"]["preset_params"] = {{"rows", 2}};
  expect_error(d, "problem.preset_params");

  d = base_doc();
  d["problem"]["T"] = 0.0;
  expect_error(d, "problem.T");

  d = base_doc();
  d["problem"]["N"] = 1;
  expect_error(d, "problem.N");

  d = json{{"problem", {{"T", 1.0}, {"N", 11}}}};
  expect_error(d, "missing required key \"agents\"");

  d = json{{"problem",
            {{"agents", {{{"id", 1}, {"model", "warp_drive"}}}}}}};
  expect_error(d, "unknown model \"warp_drive\"");

  d = json{{"problem",
            {{"agents",
              {{{"id", 1}, {"model", "van_der_pol"}, {"x0", {1.0, "a"}}}}}}}};
  expect_error(d, "numbers only");

  d = json{{"problem",
            {{"agents",
              {{{"id", 1}, {"model", "van_der_pol"}},
               {{"id", 2}, {"model", "van_der_pol"}}}},
             {"couplings",
              {{{"from", 3}, {"to", 1}, {"model", "vdp_link"}}}}}}};
  expect_error(d, "invalid problem");

  d = base_doc();
  d["controller"] = {{"type", "quantum"}};
  expect_error(d, "controller.type");

  d = base_doc();
  d["controller"] = {{"q_max", 0}};
  expect_error(d, "controller.q_max");

  d = base_doc();
  d["controller"] = {{"eps", -1.0}};
  expect_error(d, "controller.eps");

  d = base_doc();
  d["controller"] = {{"gamma_min", 2.0}, {"gamma_max", 1.0}};
  expect_error(d, "gamma_min <= gamma_max");

  d = base_doc();
  d["controller"] = {{"active", {1, 1}}};
  expect_error(d, "listed twice");

  d = base_doc();
  d["controller"] = {{"active", {9}}};
  expect_error(d, "unknown agent id 9");

  d = base_doc();
  d["controller"] = {{"solver", {{"integrator", "euler"}}}};
  expect_error(d, "integrator");

  d = base_doc();
  d["controller"] = {{"convergence_norm", "l3"}};
  expect_error(d, "convergence_norm");

  d = base_doc();
  d["simulation"] = {{"dt", -0.1}};
  expect_error(d, "simulation.dt");

  d = base_doc();
  d["simulation"] = {{"events", {{{"t", 1.0}, {"action", "explode"}, {"id", 1}}}}};
  expect_error(d, "action");

  d = base_doc();
  d["simulation"] = {{"events", {{{"t", 1.0}, {"action", "add"}, {"id", 7}}}}};
  expect_error(d, "unknown agent id 7");

  d = base_doc();
  d["network"] = {{"coordinator", "localhost"}};
  expect_error(d, "host:port");

  d = base_doc();
  d["network"] = {{"coordinator", "localhost:0"}};
  expect_error(d, "1..65535");

  d = base_doc();
  d["network"] = {{"agents", {{"zero", "h:1"}}}};
  expect_error(d, "not an agent id");

  d = base_doc();
  d["seed"] = -3;
  expect_error(d, "seed");
}

TEST_CASE("round trip keeps the run equivalent") {
  json doc = {{"problem",
               {{"preset", "water_tank_chain"}, {"preset_params", {{"n", 3}}}, {"T", 2.0},
                {"N", 11}}},
              {"controller",
               {{"type", "central"},
                {"q_max", 9},
                {"eps", 1e-4},
                {"adapt_penalties", true},
                {"active", {1, 2}},
                {"solver", {{"integrator", "heun"}, {"max_gradient_iterations", 50}}}}},
              {"simulation",
               {{"dt", 0.5},
                {"steps", 4},
                {"events", {{{"t", 1.0}, {"action", "add"}, {"id", 3}}}}}},
              {"network",
               {{"coordinator", "127.0.0.1:9100"}, {"agents", {{"1", "127.0.0.1:9101"}}}}},
              {"seed", 7}};

  const RunConfig c1 = parse_config(doc);
  const json dumped = to_json(c1);
  const RunConfig c2 = parse_config(dumped);

  // identical documents after one more round proves the fixed point
  CHECK(to_json(c2) == dumped);

  REQUIRE(c2.problem.agents.size() == c1.problem.agents.size());
  for (size_t i = 0; i < c1.problem.agents.size(); ++i) {
    const AgentModel& a = c1.problem.agents[i];
    const AgentModel& b = c2.problem.agents[i];
    CHECK(a.id == b.id);
    CHECK(a.params == b.params);
    CHECK(same_vec(a.x0, b.x0));
    CHECK(same_vec(a.u_min, b.u_min));
    CHECK(same_vec(a.u_max, b.u_max));
    // rebuilt callbacks evaluate identically
    const Vec x = Vec::Constant(a.nx, 1.7);
    const Vec u = Vec::Constant(a.nu, 0.05);
    CHECK(same_vec(a.f(x, u, 0.3), b.f(x, u, 0.3)));
    CHECK(a.l(x, u, 0.3) == b.l(x, u, 0.3));
  }
  CHECK(c2.problem.couplings.size() == c1.problem.couplings.size());
  CHECK(c2.problem.T == c1.problem.T);
  CHECK(c2.problem.N == c1.problem.N);
  CHECK(c2.controller == "central");
  CHECK(c2.q_max == 9);
  CHECK(c2.admm.eps == 1e-4);
  CHECK(c2.admm.adapt_penalties);
  CHECK(c2.active == c1.active);
  CHECK(c2.solver.integrator == Integrator::heun);
  CHECK(c2.solver.max_gradient_iterations == 50);
  CHECK(c2.sim.dt == 0.5);
  REQUIRE(c2.sim.events.size() == 1);
  CHECK(c2.sim.events[0].id == 3);
  CHECK(c2.coordinator_address == "127.0.0.1:9100");
  CHECK(c2.agent_addresses.at(1) == "127.0.0.1:9101");
  CHECK(c2.seed == 7);
}

TEST_CASE("file loading accepts comments and reports bad files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dmpc_config_test";
  fs::create_directories(dir);

  const fs::path good = dir / "good.json";
  {
    std::ofstream f(good);
    f << "// three tanks in a chain\n"
      << "{\"problem\": {\"preset\": \"water_tank_chain\", "
      << "\"preset_params\": {\"n\": 3}}}\n";
  }
  const RunConfig c = load_config(good.string());
  CHECK(c.problem.agents.size() == 3);

  const fs::path bad = dir / "broken.json";
  {
    std::ofstream f(bad);
    f << "{\"problem\": \n";
  }
  CHECK_THROWS_WITH_AS(load_config(bad.string()),
                       doctest::Contains("broken.json"), std::runtime_error);
  CHECK_THROWS_WITH_AS(load_config((dir / "missing.json").string()),
                       doctest::Contains("cannot open"), std::runtime_error);
  fs::remove_all(dir);
}
