#include "dmpc/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dmpc/models.hpp"

namespace dmpc {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("config: " + path + ": " + what);
}

void check_keys(const json& o, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!o.is_object()) fail(path, std::string("expected an object, got ") + o.type_name());
  for (auto it = o.begin(); it != o.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) {
      std::string msg = "unknown key \"" + it.key() + "\" (allowed:";
      for (const char* k : allowed) msg += std::string(" ") + k;
      fail(path, msg + ")");
    }
  }
}

const json* find(const json& o, const char* key) {
  auto it = o.find(key);
  return it == o.end() ? nullptr : &*it;
}

double jnum(const json& o, const std::string& path, const char* key, double dflt) {
  const json* v = find(o, key);
  if (!v) return dflt;
  if (!v->is_number()) fail(path + "." + key, std::string("expected a number, got ") + v->type_name());
  return v->get<double>();
}

int jint(const json& o, const std::string& path, const char* key, int dflt) {
  const json* v = find(o, key);
  if (!v) return dflt;
  if (!v->is_number_integer())
    fail(path + "." + key, std::string("expected an integer, got ") + v->type_name());
  return v->get<int>();
}

bool jbool(const json& o, const std::string& path, const char* key, bool dflt) {
  const json* v = find(o, key);
  if (!v) return dflt;
  if (!v->is_boolean())
    fail(path + "." + key, std::string("expected true or false, got ") + v->type_name());
  return v->get<bool>();
}

std::string jstr(const json& o, const std::string& path, const char* key,
                 const char* dflt = nullptr) {
  const json* v = find(o, key);
  if (!v) {
    if (dflt) return dflt;
    fail(path, std::string("missing required key \"") + key + "\"");
  }
  if (!v->is_string())
    fail(path + "." + key, std::string("expected a string, got ") + v->type_name());
  return v->get<std::string>();
}

uint32_t jid(const json& v, const std::string& path) {
  if (!v.is_number_integer()) fail(path, "expected a positive agent id");
  if (v.is_number_unsigned()) {
    const uint64_t u = v.get<uint64_t>();
    if (u == 0 || u > 0xffffffffull) fail(path, "expected a positive agent id");
    return static_cast<uint32_t>(u);
  }
  const int64_t i = v.get<int64_t>();
  if (i <= 0 || i > 0xffffffffll) fail(path, "expected a positive agent id");
  return static_cast<uint32_t>(i);
}

void require_number_array(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, std::string("expected an array of numbers, got ") + v.type_name());
  for (const json& e : v)
    if (!e.is_number()) fail(path, std::string("expected numbers only, got ") + e.type_name());
}

std::string list_keys(const std::vector<std::string>& keys) {
  std::string s;
  for (const std::string& k : keys) s += (s.empty() ? "" : ", ") + k;
  return s;
}

void parse_hostport(const std::string& s, const std::string& path) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    fail(path, "expected host:port, got \"" + s + "\"");
  int port = 0;
  try {
    size_t used = 0;
    port = std::stoi(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) port = 0;
  } catch (const std::exception&) {
    port = 0;
  }
  if (port < 1 || port > 65535) fail(path, "port must be in 1..65535, got \"" + s + "\"");
}

Problem parse_preset(const json& prob, const std::string& name, double T, int N) {
  const json empty = json::object();
  const json& pp = find(prob, "preset_params") ? prob.at("preset_params") : empty;
  const std::string path = "problem.preset_params";

  auto need = [&](const char* key, int lo) {
    const json* v = find(pp, key);
    if (!v) fail(path, std::string("preset \"") + name + "\" needs integer \"" + key + "\"");
    if (!v->is_number_integer() || v->get<int>() < lo) {
      std::ostringstream os;
      os << "\"" << key << "\" must be an integer >= " << lo;
      fail(path, os.str());
    }
    return v->get<int>();
  };

  if (name == "double_integrator") {
    check_keys(pp, path, {});
    return presets::double_integrator(T, N);
  }
  if (name == "spring_mass_grid") {
    check_keys(pp, path, {"rows", "cols"});
    return presets::spring_mass_grid(need("rows", 1), need("cols", 1), T, N);
  }
  if (name == "smart_grid_chain") {
    check_keys(pp, path, {"n_sinks"});
    return presets::smart_grid_chain(need("n_sinks", 1), T, N);
  }
  if (name == "water_tank_chain") {
    check_keys(pp, path, {"n"});
    return presets::water_tank_chain(need("n", 2), T, N);
  }
  if (name == "van_der_pol_chain") {
    check_keys(pp, path, {"n", "classical"});
    return presets::van_der_pol_chain(need("n", 1), T, N, jbool(pp, path, "classical", false));
  }
  fail("problem.preset", "unknown preset \"" + name +
                             "\" (available: double_integrator, spring_mass_grid, "
                             "smart_grid_chain, water_tank_chain, van_der_pol_chain)");
}

Problem parse_problem(const json& doc) {
  const json* prob = find(doc, "problem");
  if (!prob) fail("(root)", "missing required key \"problem\"");
  check_keys(*prob, "problem", {"preset", "preset_params", "T", "N", "agents", "couplings"});

  const double T = jnum(*prob, "problem", "T", 1.0);
  const int N = jint(*prob, "problem", "N", 11);
  if (T <= 0.0) fail("problem.T", "horizon must be positive");
  if (N < 2) fail("problem.N", "need at least 2 grid points");

  Problem p;
  if (find(*prob, "preset")) {
    if (find(*prob, "agents") || find(*prob, "couplings"))
      fail("problem", "a preset cannot be combined with explicit agents or couplings");
    p = parse_preset(*prob, jstr(*prob, "problem", "preset"), T, N);
  } else {
    const json* agents = find(*prob, "agents");
    if (!agents) fail("problem", "missing required key \"agents\" (or use \"preset\")");
    if (!agents->is_array() || agents->empty())
      fail("problem.agents", "expected a non-empty array");

    const std::vector<std::string> akeys = agent_model_keys();
    for (size_t i = 0; i < agents->size(); ++i) {
      const json& a = (*agents)[i];
      const std::string path = "problem.agents[" + std::to_string(i) + "]";
      check_keys(a, path,
                 {"id", "model", "params", "x0", "x_des", "P", "Q", "R", "u_min", "u_max"});
      const json* idv = find(a, "id");
      if (!idv) fail(path, "missing required key \"id\"");
      const uint32_t id = jid(*idv, path + ".id");
      const std::string model = jstr(a, path, "model");
      if (std::find(akeys.begin(), akeys.end(), model) == akeys.end())
        fail(path + ".model", "unknown model \"" + model + "\" (available: " + list_keys(akeys) + ")");

      json params = find(a, "params") ? a.at("params") : json::object();
      if (!params.is_object())
        fail(path + ".params", std::string("expected an object, got ") + params.type_name());
      // vector-valued convenience keys sit next to the params for readability
      for (const char* k : {"x0", "x_des", "P", "Q", "R", "u_min", "u_max"})
        if (const json* v = find(a, k)) {
          require_number_array(*v, path + "." + k);
          params[k] = *v;
        }
      try {
        p.agents.push_back(make_agent(model, id, params));
      } catch (const std::exception& e) {
        fail(path, e.what());
      }
    }

    const std::vector<std::string> ckeys = coupling_model_keys();
    if (const json* cpl = find(*prob, "couplings")) {
      if (!cpl->is_array()) fail("problem.couplings", "expected an array");
      for (size_t i = 0; i < cpl->size(); ++i) {
        const json& c = (*cpl)[i];
        const std::string path = "problem.couplings[" + std::to_string(i) + "]";
        check_keys(c, path, {"from", "to", "model", "params"});
        const json* fromv = find(c, "from");
        const json* tov = find(c, "to");
        if (!fromv || !tov) fail(path, "needs \"from\" and \"to\" agent ids");
        const uint32_t from = jid(*fromv, path + ".from");
        const uint32_t to = jid(*tov, path + ".to");
        const std::string model = jstr(c, path, "model");
        if (std::find(ckeys.begin(), ckeys.end(), model) == ckeys.end())
          fail(path + ".model",
               "unknown model \"" + model + "\" (available: " + list_keys(ckeys) + ")");
        json params = find(c, "params") ? c.at("params") : json::object();
        if (!params.is_object())
          fail(path + ".params", std::string("expected an object, got ") + params.type_name());
        try {
          // the term is added to the dynamics of "to"; "from" sends its variables
          p.couplings.push_back(make_coupling(model, to, from, params));
        } catch (const std::exception& e) {
          fail(path, e.what());
        }
      }
    }
    p.T = T;
    p.N = N;
  }

  const std::vector<std::string> errs = validate(p);
  if (!errs.empty()) {
    std::string msg = "invalid problem:";
    for (const std::string& e : errs) msg += "\n  " + e;
    fail("problem", msg);
  }
  return p;
}

Integrator parse_integrator(const json& o, const std::string& path) {
  const std::string s = jstr(o, path, "integrator", "rk4");
  if (s == "rk4") return Integrator::rk4;
  if (s == "heun") return Integrator::heun;
  fail(path + ".integrator", "expected \"rk4\" or \"heun\", got \"" + s + "\"");
}

SolverConfig parse_solver(const json& o, const std::string& path) {
  SolverConfig s;
  check_keys(o, path,
             {"max_gradient_iterations", "max_multiplier_iterations", "rel_cost_tol",
              "constraint_tol", "c0", "c_growth", "c_max", "viol_decrease", "alpha0",
              "alpha_min", "alpha_max", "armijo_sigma", "backtrack", "integrator"});
  s.max_gradient_iterations = jint(o, path, "max_gradient_iterations", s.max_gradient_iterations);
  s.max_multiplier_iterations =
      jint(o, path, "max_multiplier_iterations", s.max_multiplier_iterations);
  if (s.max_gradient_iterations < 1) fail(path + ".max_gradient_iterations", "must be >= 1");
  if (s.max_multiplier_iterations < 1) fail(path + ".max_multiplier_iterations", "must be >= 1");
  s.rel_cost_tol = jnum(o, path, "rel_cost_tol", s.rel_cost_tol);
  s.constraint_tol = jnum(o, path, "constraint_tol", s.constraint_tol);
  s.c0 = jnum(o, path, "c0", s.c0);
  s.c_growth = jnum(o, path, "c_growth", s.c_growth);
  s.c_max = jnum(o, path, "c_max", s.c_max);
  s.viol_decrease = jnum(o, path, "viol_decrease", s.viol_decrease);
  s.alpha0 = jnum(o, path, "alpha0", s.alpha0);
  s.alpha_min = jnum(o, path, "alpha_min", s.alpha_min);
  s.alpha_max = jnum(o, path, "alpha_max", s.alpha_max);
  s.armijo_sigma = jnum(o, path, "armijo_sigma", s.armijo_sigma);
  s.backtrack = jnum(o, path, "backtrack", s.backtrack);
  if (s.backtrack <= 0.0 || s.backtrack >= 1.0) fail(path + ".backtrack", "must be in (0, 1)");
  s.integrator = parse_integrator(o, path);
  return s;
}

}  // namespace

RunConfig parse_config(const json& doc) {
  check_keys(doc, "(root)", {"problem", "controller", "simulation", "network", "seed"});

  RunConfig c;
  c.problem = parse_problem(doc);

  std::set<uint32_t> known;
  for (const AgentModel& a : c.problem.agents) known.insert(a.id);

  if (const json* ctl = find(doc, "controller")) {
    const std::string path = "controller";
    check_keys(*ctl, path,
               {"type", "q_max", "eps", "rho0", "convergence_norm", "adapt_penalties",
                "gamma_min", "gamma_max", "adapt_threshold", "rho_min", "rho_max",
                "approximate_cost", "approximate_dynamics", "approximate_constraints",
                "multi_threading", "active", "solver"});
    c.controller = jstr(*ctl, path, "type", "distributed");
    if (c.controller != "central" && c.controller != "distributed")
      fail(path + ".type", "expected \"central\" or \"distributed\", got \"" + c.controller + "\"");

    const int qm = jint(*ctl, path, "q_max", static_cast<int>(c.q_max));
    if (qm < 1) fail(path + ".q_max", "must be >= 1");
    c.q_max = static_cast<uint32_t>(qm);

    AdmmOptions& a = c.admm;
    a.eps = jnum(*ctl, path, "eps", a.eps);
    a.rho0 = jnum(*ctl, path, "rho0", a.rho0);
    const std::string nrm = jstr(*ctl, path, "convergence_norm", "l2");
    if (nrm != "l2" && nrm != "sup")
      fail(path + ".convergence_norm", "expected \"l2\" or \"sup\", got \"" + nrm + "\"");
    a.sup_norm = nrm == "sup";
    a.adapt_penalties = jbool(*ctl, path, "adapt_penalties", a.adapt_penalties);
    a.gamma_min = jnum(*ctl, path, "gamma_min", a.gamma_min);
    a.gamma_max = jnum(*ctl, path, "gamma_max", a.gamma_max);
    a.adapt_threshold = jnum(*ctl, path, "adapt_threshold", a.adapt_threshold);
    a.rho_min = jnum(*ctl, path, "rho_min", a.rho_min);
    a.rho_max = jnum(*ctl, path, "rho_max", a.rho_max);
    a.approximate_cost = jbool(*ctl, path, "approximate_cost", false);
    a.approximate_dynamics = jbool(*ctl, path, "approximate_dynamics", false);
    a.approximate_constraints = jbool(*ctl, path, "approximate_constraints", false);
    if (a.eps < 0.0) fail(path + ".eps", "must be >= 0");
    if (a.rho0 <= 0.0) fail(path + ".rho0", "must be positive");
    if (a.gamma_min <= 0.0 || a.gamma_max < a.gamma_min)
      fail(path, "needs 0 < gamma_min <= gamma_max");
    if (a.rho_min <= 0.0 || a.rho_max < a.rho_min) fail(path, "needs 0 < rho_min <= rho_max");
    if (a.adapt_threshold < 0.0) fail(path + ".adapt_threshold", "must be >= 0");

    c.multi_threading = jbool(*ctl, path, "multi_threading", false);

    if (const json* sv = find(*ctl, "solver")) c.solver = parse_solver(*sv, path + ".solver");

    if (const json* act = find(*ctl, "active")) {
      if (!act->is_array()) fail(path + ".active", "expected an array of agent ids");
      std::set<uint32_t> seen;
      for (size_t i = 0; i < act->size(); ++i) {
        const uint32_t id = jid((*act)[i], path + ".active[" + std::to_string(i) + "]");
        if (!known.count(id)) {
          std::ostringstream os;
          os << "unknown agent id " << id;
          fail(path + ".active", os.str());
        }
        if (!seen.insert(id).second) {
          std::ostringstream os;
          os << "agent id " << id << " listed twice";
          fail(path + ".active", os.str());
        }
        c.active.push_back(id);
      }
    }
  }
  c.admm.solver = c.solver;

  if (const json* sim = find(doc, "simulation")) {
    const std::string path = "simulation";
    check_keys(*sim, path, {"dt", "steps", "plant_substeps", "blowup", "events"});
    c.sim.dt = jnum(*sim, path, "dt", c.sim.dt);
    c.sim.steps = jint(*sim, path, "steps", c.sim.steps);
    c.sim.plant_substeps = jint(*sim, path, "plant_substeps", c.sim.plant_substeps);
    c.sim.blowup = jnum(*sim, path, "blowup", c.sim.blowup);
    if (c.sim.dt <= 0.0) fail(path + ".dt", "must be positive");
    if (c.sim.steps < 1) fail(path + ".steps", "must be >= 1");
    if (c.sim.plant_substeps < 1) fail(path + ".plant_substeps", "must be >= 1");
    if (c.sim.blowup <= 0.0) fail(path + ".blowup", "must be positive");
    if (const json* evs = find(*sim, "events")) {
      if (!evs->is_array()) fail(path + ".events", "expected an array");
      for (size_t i = 0; i < evs->size(); ++i) {
        const json& e = (*evs)[i];
        const std::string epath = path + ".events[" + std::to_string(i) + "]";
        check_keys(e, epath, {"t", "action", "id"});
        PlugEvent ev;
        ev.t = jnum(e, epath, "t", -1.0);
        if (ev.t < 0.0) fail(epath + ".t", "needs a time >= 0");
        const std::string action = jstr(e, epath, "action");
        if (action == "add")
          ev.attach = true;
        else if (action == "remove")
          ev.attach = false;
        else
          fail(epath + ".action", "expected \"add\" or \"remove\", got \"" + action + "\"");
        const json* idv = find(e, "id");
        if (!idv) fail(epath, "missing required key \"id\"");
        ev.id = jid(*idv, epath + ".id");
        if (!known.count(ev.id)) {
          std::ostringstream os;
          os << "unknown agent id " << ev.id;
          fail(epath + ".id", os.str());
        }
        c.sim.events.push_back(ev);
      }
    }
  }

  if (const json* net = find(doc, "network")) {
    const std::string path = "network";
    check_keys(*net, path, {"coordinator", "agents", "step_timeout_ms", "plug_and_play"});
    if (find(*net, "coordinator")) {
      c.coordinator_address = jstr(*net, path, "coordinator");
      parse_hostport(c.coordinator_address, path + ".coordinator");
    }
    if (const json* ag = find(*net, "agents")) {
      if (!ag->is_object()) fail(path + ".agents", "expected an object mapping id to host:port");
      for (auto it = ag->begin(); it != ag->end(); ++it) {
        uint32_t id = 0;
        try {
          size_t used = 0;
          const unsigned long v = std::stoul(it.key(), &used);
          if (used != it.key().size() || v == 0 || v > 0xffffffffull) throw std::exception();
          id = static_cast<uint32_t>(v);
        } catch (const std::exception&) {
          fail(path + ".agents", "key \"" + it.key() + "\" is not an agent id");
        }
        if (!known.count(id)) {
          std::ostringstream os;
          os << "unknown agent id " << id;
          fail(path + ".agents", os.str());
        }
        if (!it.value().is_string())
          fail(path + ".agents." + it.key(), "expected a host:port string");
        const std::string addr = it.value().get<std::string>();
        parse_hostport(addr, path + ".agents." + it.key());
        c.agent_addresses[id] = addr;
      }
    }
    c.step_timeout_ms = jint(*net, path, "step_timeout_ms", c.step_timeout_ms);
    if (c.step_timeout_ms < 1) fail(path + ".step_timeout_ms", "must be >= 1");
    c.plug_and_play = jbool(*net, path, "plug_and_play", false);
  }

  if (const json* seed = find(doc, "seed")) {
    if (!seed->is_number_integer() || (seed->is_number_integer() && !seed->is_number_unsigned() &&
                                       seed->get<int64_t>() < 0))
      fail("seed", "expected a non-negative integer");
    c.seed = seed->get<uint64_t>();
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open \"" + path + "\"");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config: " + path + ": " + e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& c) {
  json doc;

  json agents = json::array();
  for (const AgentModel& a : c.problem.agents) {
    if (a.model_key.empty()) {
      std::ostringstream os;
      os << "agent " << a.id << " was not built from a named model and cannot be serialized";
      throw std::runtime_error(os.str());
    }
    agents.push_back({{"id", a.id}, {"model", a.model_key}, {"params", a.params}});
  }
  json couplings = json::array();
  for (const CouplingModel& cp : c.problem.couplings) {
    if (cp.model_key.empty()) {
      std::ostringstream os;
      os << "coupling " << cp.owner << " <- " << cp.neighbor
         << " was not built from a named model and cannot be serialized";
      throw std::runtime_error(os.str());
    }
    couplings.push_back({{"from", cp.neighbor},
                         {"to", cp.owner},
                         {"model", cp.model_key},
                         {"params", cp.params}});
  }
  doc["problem"] = {{"T", c.problem.T}, {"N", c.problem.N}, {"agents", agents}};
  if (!couplings.empty()) doc["problem"]["couplings"] = couplings;

  const SolverConfig& s = c.solver;
  json solver = {{"max_gradient_iterations", s.max_gradient_iterations},
                 {"max_multiplier_iterations", s.max_multiplier_iterations},
                 {"rel_cost_tol", s.rel_cost_tol},
                 {"constraint_tol", s.constraint_tol},
                 {"c0", s.c0},
                 {"c_growth", s.c_growth},
                 {"c_max", s.c_max},
                 {"viol_decrease", s.viol_decrease},
                 {"alpha0", s.alpha0},
                 {"alpha_min", s.alpha_min},
                 {"alpha_max", s.alpha_max},
                 {"armijo_sigma", s.armijo_sigma},
                 {"backtrack", s.backtrack},
                 {"integrator", s.integrator == Integrator::rk4 ? "rk4" : "heun"}};

  const AdmmOptions& a = c.admm;
  doc["controller"] = {{"type", c.controller},
                       {"q_max", c.q_max},
                       {"eps", a.eps},
                       {"rho0", a.rho0},
                       {"convergence_norm", a.sup_norm ? "sup" : "l2"},
                       {"adapt_penalties", a.adapt_penalties},
                       {"gamma_min", a.gamma_min},
                       {"gamma_max", a.gamma_max},
                       {"adapt_threshold", a.adapt_threshold},
                       {"rho_min", a.rho_min},
                       {"rho_max", a.rho_max},
                       {"approximate_cost", a.approximate_cost},
                       {"approximate_dynamics", a.approximate_dynamics},
                       {"approximate_constraints", a.approximate_constraints},
                       {"multi_threading", c.multi_threading},
                       {"solver", solver}};
  if (!c.active.empty()) doc["controller"]["active"] = c.active;

  doc["simulation"] = {{"dt", c.sim.dt},
                       {"steps", c.sim.steps},
                       {"plant_substeps", c.sim.plant_substeps},
                       {"blowup", c.sim.blowup}};
  if (!c.sim.events.empty()) {
    json evs = json::array();
    for (const PlugEvent& e : c.sim.events)
      evs.push_back({{"t", e.t}, {"action", e.attach ? "add" : "remove"}, {"id", e.id}});
    doc["simulation"]["events"] = evs;
  }

  if (!c.coordinator_address.empty() || !c.agent_addresses.empty()) {
    json net = {{"step_timeout_ms", c.step_timeout_ms}, {"plug_and_play", c.plug_and_play}};
    if (!c.coordinator_address.empty()) net["coordinator"] = c.coordinator_address;
    if (!c.agent_addresses.empty()) {
      json ag = json::object();
      for (const auto& [id, addr] : c.agent_addresses) ag[std::to_string(id)] = addr;
      net["agents"] = ag;
    }
    doc["network"] = net;
  }

  doc["seed"] = c.seed;
  return doc;
}

}  // namespace dmpc
