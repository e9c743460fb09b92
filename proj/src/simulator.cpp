#include "dmpc/simulator.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dmpc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// V + trapezoid of l along (x, u), the same objective AdmmAgent reports.
double agent_objective(const AgentModel& m, const Trajectory& x, const Trajectory& u,
                       double T) {
  double J = m.V ? m.V(x.at(x.size() - 1), T) : 0.0;
  if (m.l) {
    for (int k = 0; k < x.size(); ++k)
      J += x.quad_weight(k) * m.l(x.at(k), u.at(k), x.time(k));
  }
  return J;
}

}  // namespace

StackLayout make_stack_layout(const Problem& p) {
  StackLayout L;
  for (const AgentModel& a : p.agents) {
    L.ids.push_back(a.id);
    L.x_off[a.id] = L.nx_total;
    L.u_off[a.id] = L.nu_total;
    L.nx_total += a.nx;
    L.nu_total += a.nu;
  }
  return L;
}

OcpInstance make_central_instance(const Problem& p) {
  auto pr = std::make_shared<const Problem>(p);
  const StackLayout L = make_stack_layout(p);

  // flat index tables so the callbacks do no map lookups
  struct ABlk {
    const AgentModel* m;
    int xo, nx, uo, nu;
  };
  struct CBlk {
    const CouplingModel* c;
    ABlk o, n;
  };
  auto ab = std::make_shared<std::vector<ABlk>>();
  std::map<uint32_t, ABlk> by_id;
  for (const AgentModel& a : pr->agents) {
    ABlk b{&a, L.x_off.at(a.id), a.nx, L.u_off.at(a.id), a.nu};
    ab->push_back(b);
    by_id[a.id] = b;
  }
  auto cb = std::make_shared<std::vector<CBlk>>();
  for (const CouplingModel& c : pr->couplings)
    cb->push_back({&c, by_id.at(c.owner), by_id.at(c.neighbor)});

  OcpInstance inst;
  inst.nx = L.nx_total;
  inst.nu = L.nu_total;
  inst.T = p.T;
  inst.N = p.N;
  inst.x0 = Vec(L.nx_total);
  inst.u_min = Vec(L.nu_total);
  inst.u_max = Vec(L.nu_total);
  for (const ABlk& b : *ab) {
    inst.x0.segment(b.xo, b.nx) = b.m->x0;
    inst.u_min.segment(b.uo, b.nu) = b.m->u_min;
    inst.u_max.segment(b.uo, b.nu) = b.m->u_max;
  }

  inst.f = [pr, ab, cb](double t, const Vec& x, const Vec& u) {
    Vec dx(x.size());
    for (const ABlk& b : *ab)
      dx.segment(b.xo, b.nx) = b.m->f(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    for (const CBlk& c : *cb)
      dx.segment(c.o.xo, c.o.nx) +=
          c.c->f(x.segment(c.o.xo, c.o.nx), u.segment(c.o.uo, c.o.nu),
                 x.segment(c.n.xo, c.n.nx), u.segment(c.n.uo, c.n.nu), t);
    return dx;
  };
  inst.dfdx = [pr, ab, cb](double t, const Vec& x, const Vec& u) {
    Mat J = Mat::Zero(x.size(), x.size());
    for (const ABlk& b : *ab)
      J.block(b.xo, b.xo, b.nx, b.nx) =
          b.m->dfdx(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    for (const CBlk& c : *cb) {
      const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
      const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
      J.block(c.o.xo, c.o.xo, c.o.nx, c.o.nx) += c.c->dfdxi(xi, ui, xj, uj, t);
      J.block(c.o.xo, c.n.xo, c.o.nx, c.n.nx) += c.c->dfdxj(xi, ui, xj, uj, t);
    }
    return J;
  };
  inst.dfdu = [pr, ab, cb, nu = L.nu_total](double t, const Vec& x, const Vec& u) {
    Mat J = Mat::Zero(x.size(), nu);
    for (const ABlk& b : *ab)
      J.block(b.xo, b.uo, b.nx, b.nu) =
          b.m->dfdu(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    for (const CBlk& c : *cb) {
      const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
      const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
      J.block(c.o.xo, c.o.uo, c.o.nx, c.o.nu) += c.c->dfdui(xi, ui, xj, uj, t);
      J.block(c.o.xo, c.n.uo, c.o.nx, c.n.nu) += c.c->dfduj(xi, ui, xj, uj, t);
    }
    return J;
  };

  inst.l = [ab](double t, const Vec& x, const Vec& u) {
    double s = 0.0;
    for (const ABlk& b : *ab)
      if (b.m->l) s += b.m->l(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    return s;
  };
  inst.dldx = [ab](double t, const Vec& x, const Vec& u) {
    Vec g = Vec::Zero(x.size());
    for (const ABlk& b : *ab)
      if (b.m->dldx)
        g.segment(b.xo, b.nx) = b.m->dldx(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    return g;
  };
  inst.dldu = [ab, nu = L.nu_total](double t, const Vec& x, const Vec& u) {
    Vec g = Vec::Zero(nu);
    for (const ABlk& b : *ab)
      if (b.m->dldu)
        g.segment(b.uo, b.nu) = b.m->dldu(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
    return g;
  };
  inst.V = [ab, T = p.T](const Vec& xT, const Vec&) {
    double s = 0.0;
    for (const ABlk& b : *ab)
      if (b.m->V) s += b.m->V(xT.segment(b.xo, b.nx), T);
    return s;
  };
  inst.dVdx = [ab, T = p.T](const Vec& xT, const Vec&) {
    Vec g = Vec::Zero(xT.size());
    for (const ABlk& b : *ab)
      if (b.m->dVdx) g.segment(b.xo, b.nx) = b.m->dVdx(xT.segment(b.xo, b.nx), T);
    return g;
  };
  inst.dVdu = [nu = L.nu_total](const Vec&, const Vec&) { return Vec::Zero(nu); };

  // equality rows: agents in order, then couplings; inequalities the same
  int ng = 0, nh = 0;
  auto goff = std::make_shared<std::vector<int>>();
  auto hoff = std::make_shared<std::vector<int>>();
  auto cgoff = std::make_shared<std::vector<int>>();
  auto choff = std::make_shared<std::vector<int>>();
  for (const ABlk& b : *ab) {
    goff->push_back(ng);
    hoff->push_back(nh);
    ng += b.m->ng;
    nh += b.m->nh;
  }
  for (const CBlk& c : *cb) {
    cgoff->push_back(ng);
    choff->push_back(nh);
    ng += c.c->ng;
    nh += c.c->nh;
  }
  inst.ng = ng;
  inst.nh = nh;

  if (ng > 0) {
    inst.g = [ab, cb, goff, cgoff, ng](double t, const Vec& x, const Vec& u) {
      Vec out = Vec::Zero(ng);
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->ng > 0)
          out.segment((*goff)[i], b.m->ng) =
              b.m->g(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->ng > 0)
          out.segment((*cgoff)[i], c.c->ng) =
              c.c->g(x.segment(c.o.xo, c.o.nx), u.segment(c.o.uo, c.o.nu),
                     x.segment(c.n.xo, c.n.nx), u.segment(c.n.uo, c.n.nu), t);
      }
      return out;
    };
    inst.dgdx = [ab, cb, goff, cgoff, ng](double t, const Vec& x, const Vec& u) {
      Mat J = Mat::Zero(ng, x.size());
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->ng > 0)
          J.block((*goff)[i], b.xo, b.m->ng, b.nx) =
              b.m->dgdx(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->ng == 0) continue;
        const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
        const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
        J.block((*cgoff)[i], c.o.xo, c.c->ng, c.o.nx) = c.c->dgdxi(xi, ui, xj, uj, t);
        J.block((*cgoff)[i], c.n.xo, c.c->ng, c.n.nx) = c.c->dgdxj(xi, ui, xj, uj, t);
      }
      return J;
    };
    inst.dgdu = [ab, cb, goff, cgoff, ng, nu = L.nu_total](double t, const Vec& x,
                                                           const Vec& u) {
      Mat J = Mat::Zero(ng, nu);
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->ng > 0)
          J.block((*goff)[i], b.uo, b.m->ng, b.nu) =
              b.m->dgdu(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->ng == 0) continue;
        const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
        const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
        J.block((*cgoff)[i], c.o.uo, c.c->ng, c.o.nu) = c.c->dgdui(xi, ui, xj, uj, t);
        J.block((*cgoff)[i], c.n.uo, c.c->ng, c.n.nu) = c.c->dgduj(xi, ui, xj, uj, t);
      }
      return J;
    };
  }
  if (nh > 0) {
    inst.h = [ab, cb, hoff, choff, nh](double t, const Vec& x, const Vec& u) {
      Vec out = Vec::Zero(nh);
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->nh > 0)
          out.segment((*hoff)[i], b.m->nh) =
              b.m->h(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->nh > 0)
          out.segment((*choff)[i], c.c->nh) =
              c.c->h(x.segment(c.o.xo, c.o.nx), u.segment(c.o.uo, c.o.nu),
                     x.segment(c.n.xo, c.n.nx), u.segment(c.n.uo, c.n.nu), t);
      }
      return out;
    };
    inst.dhdx = [ab, cb, hoff, choff, nh](double t, const Vec& x, const Vec& u) {
      Mat J = Mat::Zero(nh, x.size());
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->nh > 0)
          J.block((*hoff)[i], b.xo, b.m->nh, b.nx) =
              b.m->dhdx(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->nh == 0) continue;
        const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
        const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
        J.block((*choff)[i], c.o.xo, c.c->nh, c.o.nx) = c.c->dhdxi(xi, ui, xj, uj, t);
        J.block((*choff)[i], c.n.xo, c.c->nh, c.n.nx) = c.c->dhdxj(xi, ui, xj, uj, t);
      }
      return J;
    };
    inst.dhdu = [ab, cb, hoff, choff, nh, nu = L.nu_total](double t, const Vec& x,
                                                           const Vec& u) {
      Mat J = Mat::Zero(nh, nu);
      for (size_t i = 0; i < ab->size(); ++i) {
        const ABlk& b = (*ab)[i];
        if (b.m->nh > 0)
          J.block((*hoff)[i], b.uo, b.m->nh, b.nu) =
              b.m->dhdu(x.segment(b.xo, b.nx), u.segment(b.uo, b.nu), t);
      }
      for (size_t i = 0; i < cb->size(); ++i) {
        const CBlk& c = (*cb)[i];
        if (c.c->nh == 0) continue;
        const auto xi = x.segment(c.o.xo, c.o.nx), ui = u.segment(c.o.uo, c.o.nu);
        const auto xj = x.segment(c.n.xo, c.n.nx), uj = u.segment(c.n.uo, c.n.nu);
        J.block((*choff)[i], c.o.uo, c.c->nh, c.o.nu) = c.c->dhdui(xi, ui, xj, uj, t);
        J.block((*choff)[i], c.n.uo, c.c->nh, c.n.nu) = c.c->dhduj(xi, ui, xj, uj, t);
      }
      return J;
    };
  }
  return inst;
}

void Controller::plug_in(uint32_t) {
  throw std::logic_error("controller does not support plug events");
}
void Controller::plug_out(uint32_t) {
  throw std::logic_error("controller does not support plug events");
}

CentralController::CentralController(Problem problem, SolverConfig config)
    : full_(std::move(problem)), cfg_(config) {
  for (const AgentModel& a : full_.agents) active_.push_back(a.id);
  rebuild();
}

void CentralController::rebuild() {
  sub_ = subproblem(full_, active_);
  lay_ = make_stack_layout(sub_);
  inst_ = make_central_instance(sub_);
  u_warm_ = Trajectory(sub_.T, sub_.N, lay_.nu_total);
  u_warm_.set_zero();
  al_ = AugLagState{};
  last_t_.reset();
}

std::vector<uint32_t> CentralController::active() const { return active_; }

void CentralController::plug_in(uint32_t id) {
  if (!full_.find_agent(id)) throw std::invalid_argument("plug_in: unknown agent id");
  if (std::count(active_.begin(), active_.end(), id))
    throw std::invalid_argument("plug_in: agent already attached");
  const StackLayout old_lay = lay_;
  const Trajectory old_u = u_warm_;
  std::vector<uint32_t> next;
  for (const AgentModel& a : full_.agents)  // keep problem order
    if (a.id == id || std::count(active_.begin(), active_.end(), a.id))
      next.push_back(a.id);
  active_ = std::move(next);
  rebuild();
  // carry the survivors' control blocks into the fresh warm start
  for (uint32_t kept : lay_.ids) {
    auto it = old_lay.u_off.find(kept);
    if (it == old_lay.u_off.end()) continue;
    const int nu = full_.agent(kept).nu;
    u_warm_.values().middleCols(lay_.u_off.at(kept), nu) =
        old_u.values().middleCols(it->second, nu);
  }
}

void CentralController::plug_out(uint32_t id) {
  if (!std::count(active_.begin(), active_.end(), id))
    throw std::invalid_argument("plug_out: agent not attached");
  const StackLayout old_lay = lay_;
  const Trajectory old_u = u_warm_;
  active_.erase(std::remove(active_.begin(), active_.end(), id), active_.end());
  rebuild();
  for (uint32_t kept : lay_.ids) {
    const int nu = full_.agent(kept).nu;
    u_warm_.values().middleCols(lay_.u_off.at(kept), nu) =
        old_u.values().middleCols(old_lay.u_off.at(kept), nu);
  }
}

ControlStep CentralController::step(double t, const std::map<uint32_t, Vec>& states) {
  if (last_t_ && t > *last_t_) {
    const double d = t - *last_t_;
    u_warm_ = u_warm_.shifted(d);
    if (al_.initialized) {
      auto sh = [d](Trajectory& tr) {
        if (tr.size() >= 2) tr = tr.shifted(d);  // unconstrained slots stay empty
      };
      sh(al_.nu_g);
      sh(al_.c_g);
      sh(al_.nu_h);
      sh(al_.c_h);
    }
  }
  last_t_ = t;
  for (const AgentModel& a : sub_.agents) {
    auto it = states.find(a.id);
    if (it == states.end()) {
      std::ostringstream os;
      os << "no state for agent " << a.id;
      throw std::invalid_argument(os.str());
    }
    inst_.x0.segment(lay_.x_off.at(a.id), a.nx) = it->second;
  }

  const auto t0 = Clock::now();
  GradSolver solver(inst_, cfg_);
  SolveResult r = solver.solve(u_warm_, al_);
  const double wall = ms_since(t0);
  u_warm_ = r.u;

  ControlStep out;
  out.iterations = static_cast<uint32_t>(r.gradient_iterations);
  out.converged = r.converged;
  out.wall_ms = wall;
  for (const AgentModel& a : sub_.agents) {
    AgentResult ar;
    ar.x = r.x.columns(lay_.x_off.at(a.id), a.nx);
    ar.u = r.u.columns(lay_.u_off.at(a.id), a.nu);
    ar.cost = agent_objective(a, ar.x, ar.u, sub_.T);
    ar.solve_ms = wall;  // one shared solve
    ar.converged = r.converged;
    out.predicted_cost += ar.cost;
    out.agents[a.id] = std::move(ar);
  }
  return out;
}

ClusterController::ClusterController(Problem problem, ClusterOptions options)
    : cluster_(std::move(problem), options) {}

ClusterController::ClusterController(Problem problem, ClusterOptions options,
                                     std::vector<uint32_t> active)
    : cluster_(std::move(problem), options, std::move(active)) {}

namespace {

ControlStep report_to_step(RoundReport&& rep) {
  ControlStep out;
  out.iterations = rep.q_used;
  out.converged = rep.converged;
  out.epoch = rep.epoch;
  out.wall_ms = rep.wall_ms;
  for (const auto& [id, r] : rep.agents) out.predicted_cost += r.cost;
  out.agents = std::move(rep.agents);
  return out;
}

}  // namespace

ControlStep ClusterController::step(double t, const std::map<uint32_t, Vec>& states) {
  cluster_.set_states(t, states);
  ControlStep out = report_to_step(cluster_.run_round());
  for (uint32_t id : cluster_.active())
    for (const AdmmIterStats& st : cluster_.agent(id).stats())
      admm_log_.push_back({t, id, st});
  return out;
}

ControlStep CoordinatorController::step(double t, const std::map<uint32_t, Vec>& states) {
  coord_.push_states(t, states);
  return report_to_step(coord_.run_round());
}

std::vector<uint32_t> CoordinatorController::active() const {
  const auto& s = coord_.active();
  return std::vector<uint32_t>(s.begin(), s.end());
}

Simulator::Simulator(Problem problem, SimOptions options)
    : problem_(std::move(problem)), opt_(options) {
  if (opt_.dt <= 0.0) throw std::invalid_argument("sampling interval must be positive");
  if (opt_.steps < 1) throw std::invalid_argument("need at least one closed-loop step");
  if (opt_.plant_substeps < 1) throw std::invalid_argument("need at least one substep");
}

SimResult Simulator::run(Controller& ctl) {
  SimResult res;
  const double dt = opt_.dt;

  std::map<uint32_t, Vec> states;
  for (const AgentModel& a : problem_.agents) states[a.id] = a.x0;

  std::vector<PlugEvent> events = opt_.events;
  std::stable_sort(events.begin(), events.end(),
                   [](const PlugEvent& a, const PlugEvent& b) { return a.t < b.t; });
  size_t next_ev = 0;

  std::vector<std::map<uint32_t, Vec>> hist;
  hist.push_back(states);

  for (int k = 0; k < opt_.steps; ++k) {
    const double tk = k * dt;
    while (next_ev < events.size() && events[next_ev].t <= tk + 1e-9) {
      const PlugEvent& ev = events[next_ev++];
      if (ev.attach)
        ctl.plug_in(ev.id);
      else
        ctl.plug_out(ev.id);
    }

    ControlStep cs = ctl.step(tk, states);

    SimStepLog log;
    log.t = tk;
    log.iterations = cs.iterations;
    log.converged = cs.converged;
    log.epoch = cs.epoch;
    log.predicted_cost = cs.predicted_cost;
    log.wall_ms = cs.wall_ms;
    log.states = states;
    for (const auto& [id, r] : cs.agents) {
      log.solve_ms[id] = r.solve_ms;
      log.controls[id] = r.u.size() > 0 ? r.u.at(0) : Vec(0);
      if (opt_.keep_predictions) {
        log.predicted_x[id] = r.x;
        log.predicted_u[id] = r.u;
      }
    }

    // the plant: every attached agent with its couplings, controls linearly
    // interpolated from the predictions over local time [0, dt]
    struct PBlk {
      const AgentModel* m;
      const Trajectory* u;
      int xo;
    };
    std::vector<PBlk> pb;
    std::map<uint32_t, int> xo;
    int nxt = 0;
    for (const AgentModel& a : problem_.agents) {
      auto it = cs.agents.find(a.id);
      if (it == cs.agents.end()) continue;
      pb.push_back({&a, &it->second.u, nxt});
      xo[a.id] = nxt;
      nxt += a.nx;
    }
    struct PCpl {
      const CouplingModel* c;
      int oi, ni;  // indices into pb
    };
    std::vector<PCpl> pc;
    {
      std::map<uint32_t, int> idx;
      for (size_t i = 0; i < pb.size(); ++i) idx[pb[i].m->id] = static_cast<int>(i);
      for (const CouplingModel& c : problem_.couplings) {
        auto io = idx.find(c.owner), in = idx.find(c.neighbor);
        if (io != idx.end() && in != idx.end()) pc.push_back({&c, io->second, in->second});
      }
    }

    Vec xs(nxt);
    for (const PBlk& b : pb) xs.segment(b.xo, b.m->nx) = states.at(b.m->id);

    auto f_plant = [&](double tau, const Vec& z) {
      Vec dz(z.size());
      for (const PBlk& b : pb)
        dz.segment(b.xo, b.m->nx) =
            b.m->f(z.segment(b.xo, b.m->nx), b.u->lerp(tau), tau);
      for (const PCpl& c : pc) {
        const PBlk& o = pb[c.oi];
        const PBlk& n = pb[c.ni];
        dz.segment(o.xo, o.m->nx) +=
            c.c->f(z.segment(o.xo, o.m->nx), o.u->lerp(tau),
                   z.segment(n.xo, n.m->nx), n.u->lerp(tau), tau);
      }
      return dz;
    };
    auto stage_l = [&](double tau, const Vec& z) {
      double s = 0.0;
      for (const PBlk& b : pb)
        if (b.m->l) s += b.m->l(z.segment(b.xo, b.m->nx), b.u->lerp(tau), tau);
      return s;
    };

    const int S = opt_.plant_substeps;
    const double h = dt / S;
    double acc = 0.0;
    double prev_node = stage_l(0.0, xs);
    bool blown = false;
    for (int s = 0; s < S; ++s) {
      xs = integrate_ode(f_plant, std::move(xs), s * h, (s + 1) * h, 1);
      const double node = stage_l((s + 1) * h, xs);
      acc += 0.5 * h * (prev_node + node);
      prev_node = node;
      if (!xs.allFinite() || xs.cwiseAbs().maxCoeff() > opt_.blowup) {
        blown = true;
        break;
      }
    }
    for (const PBlk& b : pb) states[b.m->id] = xs.segment(b.xo, b.m->nx);

    log.stage_cost = acc;
    res.closed_loop_cost += acc;
    res.steps.push_back(std::move(log));
    hist.push_back(states);
    if (blown) {
      res.aborted = true;
      std::ostringstream os;
      os << "state magnitude passed " << opt_.blowup << " during step " << k << " at t = "
         << tk;
      res.abort_reason = os.str();
      break;
    }
  }

  // closed-loop signals on the sampling grid
  const int K = static_cast<int>(res.steps.size());
  const double T_cl = K * dt;
  for (const AgentModel& a : problem_.agents) {
    Trajectory x(T_cl, K + 1, a.nx);
    for (int r = 0; r <= K; ++r) x.set(r, hist[r].at(a.id));
    res.x_cl[a.id] = std::move(x);

    Trajectory u(T_cl, K + 1, a.nu);
    u.set_zero();  // rows stay zero while the agent is detached
    for (int r = 0; r < K; ++r) {
      auto it = res.steps[r].controls.find(a.id);
      if (it != res.steps[r].controls.end() && it->second.size() == a.nu)
        u.set(r, it->second);
    }
    if (K > 0) u.set(K, u.at(K - 1));
    res.u_cl[a.id] = std::move(u);
  }

  if (!opt_.csv_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(opt_.csv_dir);
    std::vector<std::pair<std::string, const Trajectory*>> xs_csv, us_csv;
    for (const AgentModel& a : problem_.agents) {
      xs_csv.push_back({"x" + std::to_string(a.id), &res.x_cl.at(a.id)});
      us_csv.push_back({"u" + std::to_string(a.id), &res.u_cl.at(a.id)});
    }
    write_csv((fs::path(opt_.csv_dir) / "states.csv").string(), xs_csv);
    write_csv((fs::path(opt_.csv_dir) / "controls.csv").string(), us_csv);

    // timings stay out of the CSVs so reruns of the same config are
    // byte-identical; they are reported in the run summary instead
    std::ofstream f(fs::path(opt_.csv_dir) / "steps.csv");
    f.precision(17);
    f << "t,iterations,converged,predicted_cost,stage_cost\n";
    for (const SimStepLog& s : res.steps)
      f << s.t << ',' << s.iterations << ',' << (s.converged ? 1 : 0) << ','
        << s.predicted_cost << ',' << s.stage_cost << '\n';
  }
  return res;
}

}  // namespace dmpc
