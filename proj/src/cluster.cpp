#include "dmpc/cluster.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <sstream>
#include <stdexcept>

namespace dmpc {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

LocalCluster::LocalCluster(Problem problem, ClusterOptions options)
    : problem_(std::move(problem)), opt_(std::move(options)) {
  for (const AgentModel& a : problem_.agents)
    agents_[a.id] = std::make_unique<AdmmAgent>(make_agent_setup(problem_, a.id, opt_.admm));
}

LocalCluster::LocalCluster(Problem problem, ClusterOptions options, std::vector<uint32_t> active)
    : problem_(std::move(problem)), opt_(std::move(options)) {
  const Problem sub = subproblem(problem_, active);
  for (uint32_t id : active)
    agents_[id] = std::make_unique<AdmmAgent>(make_agent_setup(sub, id, opt_.admm));
}

std::vector<uint32_t> LocalCluster::active_ids() const {
  std::vector<uint32_t> ids;
  for (const auto& [id, a] : agents_) ids.push_back(id);
  return ids;
}

std::vector<uint32_t> LocalCluster::active() const { return active_ids(); }

AdmmAgent& LocalCluster::agent(uint32_t id) {
  auto it = agents_.find(id);
  if (it == agents_.end()) {
    std::ostringstream os;
    os << "no active agent " << id;
    throw std::out_of_range(os.str());
  }
  return *it->second;
}

const AdmmAgent* LocalCluster::find_agent(uint32_t id) const {
  auto it = agents_.find(id);
  return it == agents_.end() ? nullptr : it->second.get();
}

void LocalCluster::set_states(double t, const std::map<uint32_t, Vec>& states) {
  if (last_t_ && t > *last_t_) {
    const double dt = t - *last_t_;
    for (auto& [id, a] : agents_) a->shift(dt);
  }
  last_t_ = t;
  const CouplingGraph g = subproblem(problem_, active_ids()).graph();
  for (auto& [id, a] : agents_) {
    auto own = states.find(id);
    if (own == states.end()) {
      std::ostringstream os;
      os << "set_states: no state for agent " << id;
      throw std::invalid_argument(os.str());
    }
    std::map<uint32_t, Vec> nbr;
    for (uint32_t j : g.neighborhood(id)) {
      auto it = states.find(j);
      if (it != states.end()) nbr[j] = it->second;
    }
    a->set_states(own->second, nbr);
  }
}

RoundReport LocalCluster::run_round() {
  RoundReport rep;
  rep.epoch = epoch_;
  const auto t0 = std::chrono::steady_clock::now();
  if (agents_.empty()) {
    rep.converged = true;
    return rep;
  }

  std::vector<AdmmAgent*> ags;
  for (auto& [id, a] : agents_) ags.push_back(a.get());
  const int n = static_cast<int>(ags.size());
  std::map<uint32_t, double> solve_ms;

  // line everyone up at q = 0, matching what the coordinator's reset barrier
  // does; consensus values and penalties stay warm
  for (AdmmAgent* a : ags) a->abort_round();

  // runs fn on every agent, in parallel when configured; the passes touch
  // disjoint state so the schedule cannot change the result
  std::exception_ptr failure;
  auto pass = [&](auto&& fn) {
#pragma omp parallel for schedule(static) if (opt_.parallel)
    for (int i = 0; i < n; ++i) {
      try {
        fn(*ags[i]);
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
  };
  auto deliver = [&](std::vector<Message> ms) {
    for (Message& m : ms) agent(m.to).ingest(m);
  };

  for (uint32_t q = 1; q <= opt_.q_max; ++q) {
    pass([&](AdmmAgent& a) {
      const auto s0 = std::chrono::steady_clock::now();
      a.step1_solve();
      const double ms = ms_since(s0);
#pragma omp critical
      solve_ms[a.id()] += ms;
    });
    for (AdmmAgent* a : ags) deliver(a->copies_out());
    pass([&](AdmmAgent& a) { a.step3_update(); });
    for (AdmmAgent* a : ags) deliver(a->coupling_out());
    pass([&](AdmmAgent& a) { a.step5_update(); });
    for (AdmmAgent* a : ags) deliver(a->multipliers_out());

    rep.q_used = q;
    rep.converged = std::all_of(ags.begin(), ags.end(),
                                [](const AdmmAgent* a) { return a->converged(); });
    if (rep.converged) break;
  }

  for (AdmmAgent* a : ags) {
    AgentResult r;
    r.x = a->x();
    r.u = a->u();
    r.cost = a->local_cost();
    r.solve_ms = solve_ms[a->id()];
    r.converged = a->converged();
    rep.agents[a->id()] = std::move(r);
  }
  rep.wall_ms = ms_since(t0);
  return rep;
}

std::vector<uint32_t> LocalCluster::rebuild_neighbors(uint32_t id) {
  const std::vector<uint32_t> act = active_ids();
  const Problem sub = subproblem(problem_, act);
  const CouplingGraph full = problem_.graph();
  std::vector<uint32_t> rebuilt;
  for (uint32_t j : full.neighborhood(id)) {
    auto it = agents_.find(j);
    if (it == agents_.end()) continue;
    it->second->reconfigure(make_agent_setup(sub, j, opt_.admm));
    rebuilt.push_back(j);
  }
  return rebuilt;
}

uint32_t LocalCluster::plug_in(uint32_t id) {
  if (!problem_.find_agent(id)) {
    std::ostringstream os;
    os << "plug_in: agent " << id << " not part of the problem";
    throw std::invalid_argument(os.str());
  }
  if (agents_.count(id)) {
    std::ostringstream os;
    os << "plug_in: agent " << id << " already active";
    throw std::invalid_argument(os.str());
  }
  std::vector<uint32_t> ids = active_ids();
  ids.push_back(id);
  const Problem sub = subproblem(problem_, ids);
  agents_[id] = std::make_unique<AdmmAgent>(make_agent_setup(sub, id, opt_.admm));
  ++epoch_;
  rebuild_log_.push_back({epoch_, rebuild_neighbors(id)});
  return epoch_;
}

uint32_t LocalCluster::plug_out(uint32_t id) {
  auto it = agents_.find(id);
  if (it == agents_.end()) {
    std::ostringstream os;
    os << "plug_out: agent " << id << " not active";
    throw std::invalid_argument(os.str());
  }
  agents_.erase(it);
  ++epoch_;
  rebuild_log_.push_back({epoch_, rebuild_neighbors(id)});
  return epoch_;
}

}  // namespace dmpc
