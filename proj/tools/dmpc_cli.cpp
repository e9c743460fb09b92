// Config-driven entry points: closed-loop runs with the centralized or the
// distributed controller, standalone coordinator/agent processes for the TCP
// mode, config validation and summary comparison.
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dmpc/config.hpp"
#include "dmpc/models.hpp"

namespace fs = std::filesystem;
using namespace dmpc;

namespace {

// DMPC_LOG=quiet|info|debug, default info
int log_level() {
  const char* v = std::getenv("DMPC_LOG");
  if (!v) return 1;
  const std::string s = v;
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::pair<std::string, uint16_t> split_hostport(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos)
    throw std::runtime_error("expected host:port, got \"" + s + "\"");
  return {s.substr(0, colon), static_cast<uint16_t>(std::stoi(s.substr(colon + 1)))};
}

std::vector<uint32_t> all_ids(const Problem& p) {
  std::vector<uint32_t> ids;
  for (const AgentModel& a : p.agents) ids.push_back(a.id);
  return ids;
}

// overrides shared by the run modes; CLI::Option presence decides what applies
struct CommonOpts {
  std::string config;
  std::string out = "dmpc_out";
  int q_max = 0;
  double eps = 0.0;
  int steps = 0;
  double dt = 0.0;
  long long seed = 0;
  bool approx_cost = false, approx_dynamics = false, approx_constraints = false;
  bool multi_threading = false;
  bool adapt = false;
  CLI::Option *o_qmax = nullptr, *o_eps = nullptr, *o_steps = nullptr, *o_dt = nullptr,
              *o_seed = nullptr, *o_adapt = nullptr;

  void attach(CLI::App* s, bool with_out = true) {
    s->add_option("config", config, "run description file")->required();
    if (with_out)
      s->add_option("--out", out, "directory for the CSV logs and the summary");
    o_qmax = s->add_option("--q-max", q_max, "override the consensus iteration budget");
    o_eps = s->add_option("--eps", eps, "override the per-agent convergence threshold");
    o_steps = s->add_option("--steps", steps, "override the number of closed-loop steps");
    o_dt = s->add_option("--dt", dt, "override the sampling interval");
    o_seed = s->add_option("--seed", seed, "override the recorded seed");
    s->add_flag("--approximate-cost", approx_cost, "weigh neighbor objectives into local ones");
    s->add_flag("--approximate-dynamics", approx_dynamics, "integrate neighbor copies locally");
    s->add_flag("--approximate-constraints", approx_constraints,
                "enforce neighbor constraints on copies");
    s->add_flag("--multi-threading", multi_threading, "solve agents on a worker pool");
    o_adapt = s->add_flag("--adapt,!--no-adapt", adapt, "toggle penalty adaption");
  }

  void apply(RunConfig& c) const {
    if (o_qmax->count()) {
      if (q_max < 1) throw std::runtime_error("--q-max must be >= 1");
      c.q_max = static_cast<uint32_t>(q_max);
    }
    if (o_eps->count()) {
      if (eps < 0.0) throw std::runtime_error("--eps must be >= 0");
      c.admm.eps = eps;
    }
    if (o_steps->count()) {
      if (steps < 1) throw std::runtime_error("--steps must be >= 1");
      c.sim.steps = steps;
    }
    if (o_dt->count()) {
      if (dt <= 0.0) throw std::runtime_error("--dt must be positive");
      c.sim.dt = dt;
    }
    if (o_seed->count()) {
      if (seed < 0) throw std::runtime_error("--seed must be >= 0");
      c.seed = static_cast<uint64_t>(seed);
    }
    if (approx_cost) c.admm.approximate_cost = true;
    if (approx_dynamics) c.admm.approximate_dynamics = true;
    if (approx_constraints) c.admm.approximate_constraints = true;
    if (multi_threading) c.multi_threading = true;
    if (o_adapt->count()) c.admm.adapt_penalties = adapt;
  }
};

void write_summary(const fs::path& dir,
                   const std::vector<std::pair<std::string, std::string>>& rows) {
  fs::create_directories(dir);
  std::ofstream f(dir / "summary.txt");
  for (const auto& [k, v] : rows) f << k << " = " << v << "\n";
  if (log_level() >= 1) {
    for (const auto& [k, v] : rows) std::cerr << k << " = " << v << "\n";
    std::cerr << "wrote " << dir.string() << "\n";
  }
}

void log_steps(const SimResult& res) {
  if (log_level() < 1) return;
  for (const SimStepLog& s : res.steps) {
    std::cerr << "t=" << s.t << " iterations=" << s.iterations
              << " converged=" << (s.converged ? 1 : 0)
              << " predicted_cost=" << s.predicted_cost << " stage_cost=" << s.stage_cost
              << "\n";
    if (log_level() >= 2)
      for (const auto& [id, ms] : s.solve_ms)
        std::cerr << "  agent " << id << " solve_ms=" << ms << "\n";
  }
}

std::vector<std::pair<std::string, std::string>> summary_rows(const char* mode,
                                                              const RunConfig& c,
                                                              const std::string& cfg_path,
                                                              const SimResult& res) {
  uint64_t iters = 0;
  int conv = 0;
  double wall = 0.0;
  for (const SimStepLog& s : res.steps) {
    iters += s.iterations;
    conv += s.converged ? 1 : 0;
    wall += s.wall_ms;
  }
  std::vector<std::pair<std::string, std::string>> rows = {
      {"mode", mode},
      {"config", cfg_path},
      {"seed", std::to_string(c.seed)},
      {"agents", std::to_string(c.problem.agents.size())},
      {"horizon_T", fmt(c.problem.T)},
      {"horizon_N", std::to_string(c.problem.N)},
      {"dt", fmt(c.sim.dt)},
      {"steps", std::to_string(res.steps.size())},
      {"closed_loop_cost", fmt(res.closed_loop_cost)},
      {"predicted_cost_final",
       fmt(res.steps.empty() ? 0.0 : res.steps.back().predicted_cost)},
      {"iterations_total", std::to_string(iters)},
      {"converged_steps", std::to_string(conv)},
      {"aborted", res.aborted ? "1" : "0"},
      {"wall_ms_total", fmt(wall)}};
  if (res.aborted) rows.push_back({"abort_reason", res.abort_reason});
  return rows;
}

void write_admm_logs(const fs::path& dir, const std::vector<AdmmStatRow>& rows) {
  std::map<uint32_t, std::ofstream> files;
  for (const AdmmStatRow& r : rows) {
    auto it = files.find(r.id);
    if (it == files.end()) {
      std::ofstream f(dir / ("admm_agent_" + std::to_string(r.id) + ".csv"));
      f.precision(17);
      f << "t,q,local_cost,r_norm,s_norm,conv_norm,rho_lo,rho_hi,solver_iterations\n";
      it = files.emplace(r.id, std::move(f)).first;
    }
    std::ofstream& f = it->second;
    f << r.t << ',' << r.s.q << ',' << r.s.local_cost << ',' << r.s.r_norm << ','
      << r.s.s_norm << ',' << r.s.conv_norm << ',' << r.s.rho_lo << ',' << r.s.rho_hi << ','
      << r.s.solver_iterations << '\n';
  }
}

int cmd_validate(const std::string& cfg_path) {
  const RunConfig c = load_config(cfg_path);
  std::cout << "config ok: " << c.problem.agents.size() << " agents, "
            << c.problem.couplings.size() << " couplings, T = " << c.problem.T
            << ", N = " << c.problem.N << ", controller = " << c.controller << "\n";
  return 0;
}

int cmd_sim(const CommonOpts& o, bool central) {
  RunConfig c = load_config(o.config);
  o.apply(c);
  const char* mode = central ? "sim-central" : "sim-distributed-inproc";

  c.sim.csv_dir = o.out;
  Simulator sim(c.problem, c.sim);
  SimResult res;
  std::unique_ptr<ClusterController> cluster;
  if (central) {
    CentralController ctl(c.problem, c.solver);
    if (!c.active.empty())
      for (uint32_t id : all_ids(c.problem))
        if (std::find(c.active.begin(), c.active.end(), id) == c.active.end())
          ctl.plug_out(id);
    res = sim.run(ctl);
  } else {
    ClusterOptions co;
    co.admm = c.admm;
    co.q_max = c.q_max;
    co.parallel = c.multi_threading;
    if (c.active.empty())
      cluster = std::make_unique<ClusterController>(c.problem, co);
    else
      cluster = std::make_unique<ClusterController>(c.problem, co, c.active);
    res = sim.run(*cluster);
    write_admm_logs(o.out, cluster->admm_log());
  }

  log_steps(res);
  write_summary(o.out, summary_rows(mode, c, o.config, res));
  if (res.aborted) {
    std::cerr << "aborted: " << res.abort_reason << "\n";
    return 2;
  }
  return 0;
}

int cmd_coordinator(const CommonOpts& o, int reg_timeout_ms) {
  RunConfig c = load_config(o.config);
  o.apply(c);
  if (c.coordinator_address.empty())
    throw std::runtime_error("network.coordinator is required to run the coordinator");

  const auto [host, port] = split_hostport(c.coordinator_address);
  (void)host;  // the coordinator binds locally; the address names it for agents
  auto ep = std::make_shared<TcpEndpoint>(kCoordinatorId, port);

  CoordinatorOptions co;
  co.q_max = c.q_max;
  co.step_timeout_ms = c.step_timeout_ms;
  co.plug_and_play = c.plug_and_play;
  Coordinator coord(c.problem, ep, co);

  if (log_level() >= 1) std::cerr << "waiting for registrations on port " << port << "\n";
  coord.await_registrations(all_ids(c.problem), reg_timeout_ms);
  coord.set_active(c.active.empty() ? all_ids(c.problem) : c.active);

  CoordinatorController ctl(coord);
  c.sim.csv_dir = o.out;
  Simulator sim(c.problem, c.sim);
  SimResult res;
  try {
    res = sim.run(ctl);
  } catch (...) {
    coord.shutdown_agents();
    throw;
  }
  coord.shutdown_agents();

  // per-step synchronization log; timings are meaningful here, the
  // determinism guarantee only covers the in-process modes
  fs::create_directories(o.out);
  {
    std::ofstream f(fs::path(o.out) / "coordinator_log.csv");
    f.precision(17);
    f << "step,t,iterations,converged,epoch,wall_ms";
    for (uint32_t id : all_ids(c.problem)) f << ",solve_ms_" << id;
    f << "\n";
    for (size_t k = 0; k < res.steps.size(); ++k) {
      const SimStepLog& s = res.steps[k];
      f << k << ',' << s.t << ',' << s.iterations << ',' << (s.converged ? 1 : 0) << ','
        << s.epoch << ',' << s.wall_ms;
      for (uint32_t id : all_ids(c.problem)) {
        auto it = s.solve_ms.find(id);
        f << ',';
        if (it != s.solve_ms.end()) f << it->second;
      }
      f << '\n';
    }
  }

  log_steps(res);
  write_summary(o.out, summary_rows("coordinator", c, o.config, res));
  if (res.aborted) {
    std::cerr << "aborted: " << res.abort_reason << "\n";
    return 2;
  }
  return 0;
}

int cmd_agent(const std::string& cfg_path, uint32_t id, const std::string& out) {
  RunConfig c = load_config(cfg_path);
  if (!c.problem.find_agent(id))
    throw std::runtime_error("agent " + std::to_string(id) + " is not part of the problem");
  if (c.coordinator_address.empty())
    throw std::runtime_error("network.coordinator is required to run an agent");
  auto addr = c.agent_addresses.find(id);
  if (addr == c.agent_addresses.end())
    throw std::runtime_error("network.agents lacks an address for agent " + std::to_string(id));

  const auto [own_host, own_port] = split_hostport(addr->second);
  (void)own_host;
  auto ep = std::make_shared<TcpEndpoint>(id, own_port);

  RuntimeOptions ro;
  ro.admm = c.admm;
  ro.route_timeout_ms = c.step_timeout_ms;
  ro.listen_address = addr->second;
  AgentRuntime rt(c.problem, id, ep, ro, c.active.empty() ? all_ids(c.problem) : c.active,
                  ep.get());

  const auto [chost, cport] = split_hostport(c.coordinator_address);
  ep->connect_to(chost, cport);
  if (log_level() >= 1)
    std::cerr << "agent " << id << " listening on " << addr->second << "\n";
  rt.serve();

  if (!out.empty() && rt.agent()) {
    fs::create_directories(out);
    std::ofstream f(fs::path(out) / ("admm_agent_" + std::to_string(id) + ".csv"));
    f.precision(17);
    f << "q,local_cost,r_norm,s_norm,conv_norm,rho_lo,rho_hi,solver_iterations\n";
    for (const AdmmIterStats& s : rt.agent()->stats())
      f << s.q << ',' << s.local_cost << ',' << s.r_norm << ',' << s.s_norm << ','
        << s.conv_norm << ',' << s.rho_lo << ',' << s.rho_hi << ',' << s.solver_iterations
        << '\n';
  }
  for (const std::string& e : rt.errors()) std::cerr << "agent " << id << ": " << e << "\n";
  return rt.errors().empty() ? 0 : 2;
}

std::map<std::string, std::string> read_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open summary \"" + path + "\"");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (!kv.count("closed_loop_cost"))
    throw std::runtime_error("\"" + path + "\" has no closed_loop_cost entry");
  return kv;
}

int cmd_compare(const std::string& a_path, const std::string& b_path) {
  const auto a = read_summary(a_path);
  const auto b = read_summary(b_path);
  auto get = [](const std::map<std::string, std::string>& kv, const char* k) {
    auto it = kv.find(k);
    return it == kv.end() ? std::string("?") : it->second;
  };
  const double ca = std::stod(a.at("closed_loop_cost"));
  const double cb = std::stod(b.at("closed_loop_cost"));
  const double gap = std::abs(ca - cb);
  const double rel = gap / std::max({std::abs(ca), std::abs(cb), 1e-300});

  std::cout << "mode_a = " << get(a, "mode") << "\n"
            << "mode_b = " << get(b, "mode") << "\n"
            << "closed_loop_cost_a = " << fmt(ca) << "\n"
            << "closed_loop_cost_b = " << fmt(cb) << "\n"
            << "cost_gap_abs = " << fmt(gap) << "\n"
            << "cost_gap_rel = " << fmt(rel) << "\n"
            << "iterations_total_a = " << get(a, "iterations_total") << "\n"
            << "iterations_total_b = " << get(b, "iterations_total") << "\n"
            << "wall_ms_total_a = " << get(a, "wall_ms_total") << "\n"
            << "wall_ms_total_b = " << get(b, "wall_ms_total") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coupled multi-agent mpc, centralized and consensus-based"};
  app.require_subcommand(1);

  std::string validate_cfg;
  CLI::App* validate = app.add_subcommand("validate", "parse and check a config file");
  validate->add_option("config", validate_cfg, "run description file")->required();

  CommonOpts central_o;
  CLI::App* central = app.add_subcommand("sim-central", "closed loop with the stacked solve");
  central_o.attach(central);

  CommonOpts dist_o;
  CLI::App* dist = app.add_subcommand("sim-distributed-inproc",
                                      "closed loop with in-process consensus agents");
  dist->alias("sim-distributed");
  dist_o.attach(dist);

  CommonOpts run_o;
  CLI::App* run = app.add_subcommand("run", "closed loop, mode taken from controller.type");
  run_o.attach(run);

  CommonOpts coord_o;
  int reg_timeout_ms = 30000;
  CLI::App* coord = app.add_subcommand("coordinator",
                                       "synchronize remote agents over TCP and simulate");
  coord_o.attach(coord);
  coord->add_option("--registration-timeout-ms", reg_timeout_ms,
                    "how long to wait for all agents to register");

  std::string agent_cfg, agent_out;
  uint32_t agent_id = 0;
  CLI::App* agent = app.add_subcommand("agent", "serve one agent over TCP until shutdown");
  agent->add_option("config", agent_cfg, "run description file")->required();
  agent->add_option("--id", agent_id, "agent id from the problem description")->required();
  agent->add_option("--out", agent_out, "directory for the final diagnostics log");

  std::string cmp_a, cmp_b;
  CLI::App* cmp = app.add_subcommand("compare", "report the cost gap between two summaries");
  cmp->add_option("summary_a", cmp_a, "first summary.txt")->required();
  cmp->add_option("summary_b", cmp_b, "second summary.txt")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) return cmd_validate(validate_cfg);
    if (*central) return cmd_sim(central_o, true);
    if (*dist) return cmd_sim(dist_o, false);
    if (*run) {
      const RunConfig c = load_config(run_o.config);
      return cmd_sim(run_o, c.controller == "central");
    }
    if (*coord) return cmd_coordinator(coord_o, reg_timeout_ms);
    if (*agent) return cmd_agent(agent_cfg, agent_id, agent_out);
    if (*cmp) return cmd_compare(cmp_a, cmp_b);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    const std::string what = e.what();
    return what.rfind("config:", 0) == 0 ? 1 : 2;
  }
  return 0;
}
