#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dmpc/models.hpp"
#include "dmpc/simulator.hpp"

using namespace dmpc;

namespace {

double max_abs_diff(const Trajectory& a, const Trajectory& b) {
  REQUIRE(a.size() == b.size());
  REQUIRE(a.dim() == b.dim());
  if (a.size() == 0 || a.dim() == 0) return 0.0;
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

using VecFn = std::function<Vec(double, const Vec&, const Vec&)>;

Mat fd_wrt_x(const VecFn& fn, double t, const Vec& x, const Vec& u, double e = 1e-6) {
  const Vec f0 = fn(t, x, u);
  Mat J(f0.size(), x.size());
  for (int c = 0; c < x.size(); ++c) {
    Vec xp = x, xm = x;
    xp(c) += e;
    xm(c) -= e;
    J.col(c) = (fn(t, xp, u) - fn(t, xm, u)) / (2.0 * e);
  }
  return J;
}

Mat fd_wrt_u(const VecFn& fn, double t, const Vec& x, const Vec& u, double e = 1e-6) {
  const Vec f0 = fn(t, x, u);
  Mat J(f0.size(), u.size());
  for (int c = 0; c < u.size(); ++c) {
    Vec up = u, um = u;
    up(c) += e;
    um(c) -= e;
    J.col(c) = (fn(t, x, up) - fn(t, x, um)) / (2.0 * e);
  }
  return J;
}

/// Compares every derivative callback of the stacked instance against
/// central differences of its value callbacks at randomized points.
void check_stacked_derivatives(const Problem& p, double spread, unsigned seed, double tol) {
  const OcpInstance inst = make_central_instance(p);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);

  for (int trial = 0; trial < 5; ++trial) {
    Vec x = inst.x0;
    for (int i = 0; i < x.size(); ++i) x(i) += spread * d(rng);
    Vec u(inst.nu);
    for (int i = 0; i < u.size(); ++i) {
      const double lo = std::isfinite(inst.u_min(i)) ? inst.u_min(i) : -0.5;
      const double hi = std::isfinite(inst.u_max(i)) ? inst.u_max(i) : 0.5;
      u(i) = lo + (0.5 + 0.4 * d(rng)) * (hi - lo);
    }
    const double t = 0.25 * (trial + 1);

    CHECK((inst.dfdx(t, x, u) - fd_wrt_x(inst.f, t, x, u)).cwiseAbs().maxCoeff() < tol);
    if (inst.nu > 0)
      CHECK((inst.dfdu(t, x, u) - fd_wrt_u(inst.f, t, x, u)).cwiseAbs().maxCoeff() < tol);

    VecFn l1 = [&inst](double tt, const Vec& xx, const Vec& uu) {
      return Vec::Constant(1, inst.l(tt, xx, uu));
    };
    CHECK((inst.dldx(t, x, u).transpose() - fd_wrt_x(l1, t, x, u)).cwiseAbs().maxCoeff() <
          tol);
    if (inst.nu > 0)
      CHECK((inst.dldu(t, x, u).transpose() - fd_wrt_u(l1, t, x, u)).cwiseAbs().maxCoeff() <
            tol);

    VecFn v1 = [&inst](double, const Vec& xx, const Vec& uu) {
      return Vec::Constant(1, inst.V(xx, uu));
    };
    CHECK((inst.dVdx(x, u).transpose() - fd_wrt_x(v1, t, x, u)).cwiseAbs().maxCoeff() < tol);

    if (inst.ng > 0) {
      CHECK((inst.dgdx(t, x, u) - fd_wrt_x(inst.g, t, x, u)).cwiseAbs().maxCoeff() < tol);
      if (inst.nu > 0)
        CHECK((inst.dgdu(t, x, u) - fd_wrt_u(inst.g, t, x, u)).cwiseAbs().maxCoeff() < tol);
    }
    if (inst.nh > 0) {
      CHECK((inst.dhdx(t, x, u) - fd_wrt_x(inst.h, t, x, u)).cwiseAbs().maxCoeff() < tol);
      if (inst.nu > 0)
        CHECK((inst.dhdu(t, x, u) - fd_wrt_u(inst.h, t, x, u)).cwiseAbs().maxCoeff() < tol);
    }
  }
}

/// Applies one constant control everywhere; enough to push a plant around
/// without any optimization in the loop.
struct ConstController : Controller {
  const Problem& p;
  double level;
  ConstController(const Problem& prob, double lvl) : p(prob), level(lvl) {}

  ControlStep step(double, const std::map<uint32_t, Vec>& states) override {
    ControlStep out;
    for (const AgentModel& a : p.agents) {
      AgentResult r;
      r.x = Trajectory(p.T, p.N, a.nx);
      r.x.set_constant(states.at(a.id));
      r.u = Trajectory(p.T, p.N, a.nu);
      r.u.set_constant(Vec::Constant(a.nu, level));
      out.agents[a.id] = std::move(r);
    }
    return out;
  }
  std::vector<uint32_t> active() const override {
    std::vector<uint32_t> ids;
    for (const AgentModel& a : p.agents) ids.push_back(a.id);
    return ids;
  }
};

}  // namespace

TEST_CASE("stacked derivatives match finite differences") {
  SUBCASE("water tank chain") {
    check_stacked_derivatives(presets::water_tank_chain(3, 2.0, 11), 0.25, 11u, 1e-5);
  }
  SUBCASE("spring mass grid") {
    check_stacked_derivatives(presets::spring_mass_grid(2, 2, 1.0, 11), 0.4, 23u, 1e-5);
  }
  SUBCASE("smart grid chain") {
    check_stacked_derivatives(presets::smart_grid_chain(2, 1.0, 11), 0.2, 37u, 1e-5);
  }
}

TEST_CASE("single-agent stacked instance solves identically to the plain model") {
  const Problem p = presets::double_integrator(1.0, 11);
  const AgentModel& a = p.agents[0];

  OcpInstance plain;
  plain.nx = a.nx;
  plain.nu = a.nu;
  plain.T = p.T;
  plain.N = p.N;
  plain.x0 = a.x0;
  plain.u_min = a.u_min;
  plain.u_max = a.u_max;
  plain.f = [&a](double t, const Vec& x, const Vec& u) { return a.f(x, u, t); };
  plain.dfdx = [&a](double t, const Vec& x, const Vec& u) { return a.dfdx(x, u, t); };
  plain.dfdu = [&a](double t, const Vec& x, const Vec& u) { return a.dfdu(x, u, t); };
  plain.l = [&a](double t, const Vec& x, const Vec& u) { return a.l(x, u, t); };
  plain.dldx = [&a](double t, const Vec& x, const Vec& u) { return a.dldx(x, u, t); };
  plain.dldu = [&a](double t, const Vec& x, const Vec& u) { return a.dldu(x, u, t); };
  plain.V = [&a, T = p.T](const Vec& xT, const Vec&) { return a.V(xT, T); };
  plain.dVdx = [&a, T = p.T](const Vec& xT, const Vec&) { return a.dVdx(xT, T); };
  plain.dVdu = [nu = a.nu](const Vec&, const Vec&) { return Vec::Zero(nu); };

  SolverConfig cfg;
  cfg.max_gradient_iterations = 80;
  cfg.max_multiplier_iterations = 1;

  Trajectory u0(p.T, p.N, a.nu);
  u0.set_zero();
  GradSolver s_plain(plain, cfg);
  GradSolver s_stack(make_central_instance(p), cfg);
  const SolveResult r1 = s_plain.solve(u0);
  const SolveResult r2 = s_stack.solve(u0);

  CHECK(r1.cost == r2.cost);
  CHECK(max_abs_diff(r1.x, r2.x) == 0.0);
  CHECK(max_abs_diff(r1.u, r2.u) == 0.0);
}

TEST_CASE("closed loop drives the spring pair toward its goals") {
  const Problem p = presets::spring_mass_grid(1, 2, 1.0, 11);
  SolverConfig cfg;
  cfg.max_gradient_iterations = 120;
  cfg.max_multiplier_iterations = 1;
  CentralController ctl(p, cfg);

  SimOptions so;
  so.dt = 0.1;
  so.steps = 15;
  so.plant_substeps = 8;
  Simulator sim(p, so);
  const SimResult res = sim.run(ctl);

  CHECK_FALSE(res.aborted);
  REQUIRE(res.steps.size() == 15);
  CHECK(res.closed_loop_cost > 0.0);

  for (const AgentModel& a : p.agents) {
    const Trajectory& x = res.x_cl.at(a.id);
    REQUIRE(x.size() == 16);
    CHECK((x.at(0) - a.x0).cwiseAbs().maxCoeff() == 0.0);
    const double err0 = (x.at(0) - a.x_des).norm();
    const double errT = (x.at(x.size() - 1) - a.x_des).norm();
    CHECK(errT < 0.5 * err0);
  }
  CHECK(res.steps.back().stage_cost < res.steps.front().stage_cost);
}

TEST_CASE("logged states re-integrate under the logged controls") {
  const Problem p = presets::spring_mass_grid(1, 2, 1.0, 11);
  SolverConfig cfg;
  cfg.max_gradient_iterations = 60;
  cfg.max_multiplier_iterations = 1;
  CentralController ctl(p, cfg);

  SimOptions so;
  so.dt = 0.1;
  so.steps = 4;
  so.plant_substeps = 8;
  so.keep_predictions = true;
  Simulator sim(p, so);
  const SimResult res = sim.run(ctl);
  REQUIRE(res.steps.size() == 4);

  for (size_t k = 0; k < res.steps.size(); ++k) {
    const SimStepLog& log = res.steps[k];
    // same layout and evaluation order as the plant
    struct B {
      const AgentModel* m;
      const Trajectory* u;
      int xo;
    };
    std::vector<B> pb;
    int nxt = 0;
    for (const AgentModel& a : p.agents) {
      pb.push_back({&a, &log.predicted_u.at(a.id), nxt});
      nxt += a.nx;
    }
    std::map<uint32_t, int> idx;
    for (size_t i = 0; i < pb.size(); ++i) idx[pb[i].m->id] = static_cast<int>(i);

    Vec xs(nxt);
    for (const B& b : pb) xs.segment(b.xo, b.m->nx) = log.states.at(b.m->id);
    auto f = [&](double tau, const Vec& z) {
      Vec dz(z.size());
      for (const B& b : pb)
        dz.segment(b.xo, b.m->nx) = b.m->f(z.segment(b.xo, b.m->nx), b.u->lerp(tau), tau);
      for (const CouplingModel& c : p.couplings) {
        const B& o = pb[idx.at(c.owner)];
        const B& n = pb[idx.at(c.neighbor)];
        dz.segment(o.xo, o.m->nx) += c.f(z.segment(o.xo, o.m->nx), o.u->lerp(tau),
                                         z.segment(n.xo, n.m->nx), n.u->lerp(tau), tau);
      }
      return dz;
    };
    const double h = so.dt / so.plant_substeps;
    for (int s = 0; s < so.plant_substeps; ++s)
      xs = integrate_ode(f, std::move(xs), s * h, (s + 1) * h, 1);

    for (const B& b : pb) {
      const Vec want = k + 1 < res.steps.size()
                           ? res.steps[k + 1].states.at(b.m->id)
                           : res.x_cl.at(b.m->id).at(static_cast<int>(k) + 1);
      CHECK((xs.segment(b.xo, b.m->nx) - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("distributed and central closed loops stay close on the spring pair") {
  const Problem p = presets::spring_mass_grid(1, 2, 1.0, 11);

  SimOptions so;
  so.dt = 0.1;
  so.steps = 5;
  so.plant_substeps = 8;

  SolverConfig central_cfg;
  central_cfg.max_gradient_iterations = 150;
  central_cfg.max_multiplier_iterations = 1;
  CentralController central(p, central_cfg);
  Simulator sim_c(p, so);
  const SimResult rc = sim_c.run(central);

  ClusterOptions copt;
  copt.admm.eps = 1e-4;
  copt.admm.adapt_penalties = true;
  copt.admm.solver.max_gradient_iterations = 60;
  copt.admm.solver.max_multiplier_iterations = 1;
  copt.q_max = 30;
  ClusterController dist(p, copt);
  Simulator sim_d(p, so);
  const SimResult rd = sim_d.run(dist);

  REQUIRE(rc.steps.size() == rd.steps.size());
  for (size_t k = 0; k < rc.steps.size(); ++k) {
    const double gap = std::abs(rd.steps[k].predicted_cost - rc.steps[k].predicted_cost);
    CHECK(gap <= 0.10 * std::abs(rc.steps[k].predicted_cost));
  }
  for (const AgentModel& a : p.agents) {
    const Vec xc = rc.x_cl.at(a.id).at(rc.x_cl.at(a.id).size() - 1);
    const Vec xd = rd.x_cl.at(a.id).at(rd.x_cl.at(a.id).size() - 1);
    CHECK((xc - xd).cwiseAbs().maxCoeff() < 5e-2);
  }
}

TEST_CASE("plug events attach and detach agents mid run") {
  const Problem p = presets::smart_grid_chain(2, 2.0, 11);

  ClusterOptions copt;
  copt.admm.eps = 1e-3;
  copt.admm.solver.max_gradient_iterations = 40;
  copt.admm.solver.max_multiplier_iterations = 1;
  copt.q_max = 10;
  ClusterController ctl(p, copt, {1, 2});

  SimOptions so;
  so.dt = 0.2;
  so.steps = 6;
  so.plant_substeps = 8;
  so.events.push_back({0.4, true, 3});   // boundary of step 2
  so.events.push_back({1.0, false, 3});  // boundary of step 5
  Simulator sim(p, so);
  const SimResult res = sim.run(ctl);

  CHECK_FALSE(res.aborted);
  REQUIRE(res.steps.size() == 6);
  for (size_t k = 0; k < res.steps.size(); ++k) {
    const size_t want = (k >= 2 && k <= 4) ? 3 : 2;
    CHECK(res.steps[k].solve_ms.size() == want);
  }
  CHECK(ctl.cluster().epoch() == 2);
  REQUIRE(ctl.cluster().rebuild_log().size() == 2);
  CHECK(ctl.cluster().rebuild_log()[0].second == std::vector<uint32_t>{2});
  CHECK(ctl.cluster().rebuild_log()[1].second == std::vector<uint32_t>{2});

  // detached intervals freeze the state, attached ones integrate it
  const Trajectory& x3 = res.x_cl.at(3);
  const Vec x0 = p.agent(3).x0;
  CHECK((x3.at(0) - x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((x3.at(1) - x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((x3.at(2) - x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((x3.at(3) - x3.at(2)).cwiseAbs().maxCoeff() > 0.0);
  CHECK((x3.at(6) - x3.at(5)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("the plant aborts once a state magnitude passes the bound") {
  const Problem p = presets::double_integrator(1.0, 11);
  ConstController ctl(p, 1e5);

  SimOptions so;
  so.dt = 1.0;
  so.steps = 5;
  so.plant_substeps = 4;
  so.blowup = 1e3;
  Simulator sim(p, so);
  const SimResult res = sim.run(ctl);

  CHECK(res.aborted);
  CHECK(res.abort_reason.find("magnitude") != std::string::npos);
  CHECK(res.steps.size() == 1);
  const Trajectory& x = res.x_cl.at(1);
  REQUIRE(x.size() == 2);
  CHECK(x.at(1).cwiseAbs().maxCoeff() > 1e3);
}

TEST_CASE("simulator rejects bad options") {
  const Problem p = presets::double_integrator(1.0, 11);
  SimOptions so;
  so.dt = 0.0;
  CHECK_THROWS_AS(Simulator(p, so), std::invalid_argument);
  so.dt = 0.1;
  so.steps = 0;
  CHECK_THROWS_AS(Simulator(p, so), std::invalid_argument);
  so.steps = 1;
  so.plant_substeps = 0;
  CHECK_THROWS_AS(Simulator(p, so), std::invalid_argument);
}

TEST_CASE("the base controller refuses plug events") {
  const Problem p = presets::double_integrator(1.0, 11);
  ConstController ctl(p, 0.0);
  SimOptions so;
  so.dt = 0.1;
  so.steps = 2;
  so.events.push_back({0.1, false, 1});
  Simulator sim(p, so);
  CHECK_THROWS_AS(sim.run(ctl), std::logic_error);
}

TEST_CASE("csv files land in the requested directory") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dmpc_sim_csv_test";
  fs::remove_all(dir);

  const Problem p = presets::double_integrator(1.0, 11);
  SolverConfig cfg;
  cfg.max_gradient_iterations = 40;
  cfg.max_multiplier_iterations = 1;
  CentralController ctl(p, cfg);

  SimOptions so;
  so.dt = 0.1;
  so.steps = 3;
  so.plant_substeps = 4;
  so.csv_dir = dir.string();
  Simulator sim(p, so);
  const SimResult res = sim.run(ctl);
  CHECK_FALSE(res.aborted);

  for (const char* name : {"states.csv", "controls.csv", "steps.csv"}) {
    CAPTURE(name);
    CHECK(fs::exists(dir / name));
  }
  auto lines = [](const fs::path& f) {
    std::ifstream in(f);
    size_t n = 0;
    std::string s;
    while (std::getline(in, s)) ++n;
    return n;
  };
  CHECK(lines(dir / "states.csv") == 5);  // header + 4 boundary rows
  CHECK(lines(dir / "steps.csv") == 4);   // header + one row per step
  fs::remove_all(dir);
}
