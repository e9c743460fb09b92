#include "dmpc/coordinator.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>
#include <stdexcept>

namespace dmpc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int ms_until(Clock::time_point deadline) {
  const auto d = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return static_cast<int>(d.count());
}

}  // namespace

Coordinator::Coordinator(Problem problem, std::shared_ptr<Channel> channel,
                         CoordinatorOptions options)
    : problem_(std::move(problem)),
      chan_(std::move(channel)),
      opt_(options),
      graph_(problem_.graph()) {}

std::vector<uint32_t> Coordinator::graph_neighbors(uint32_t id) const {
  return graph_.neighborhood(id);
}

void Coordinator::handle_registration(const Message& m) {
  const uint32_t id = m.id;
  const bool known = registered_.count(id) > 0;
  registered_.insert(id);
  summaries_[id] = m.summary;
  if (known) return;
  // exchange addresses with the already registered graph neighbors; the
  // lower id of each pair dials the higher one
  for (uint32_t j : graph_neighbors(id)) {
    if (j == id || !registered_.count(j)) continue;
    Message fwd;
    fwd.kind = MsgKind::register_agent;
    fwd.id = j;
    fwd.summary = summaries_[j];
    try {
      chan_->send(id, fwd);
    } catch (const std::exception&) {
    }
    Message back;
    back.kind = MsgKind::register_agent;
    back.id = id;
    back.summary = m.summary;
    try {
      chan_->send(j, back);
    } catch (const std::exception&) {
    }
  }
}

void Coordinator::await_registrations(const std::vector<uint32_t>& expected, int timeout_ms) {
  const std::set<uint32_t> want(expected.begin(), expected.end());
  const auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
  auto missing = [&] {
    std::vector<uint32_t> out;
    for (uint32_t id : want)
      if (!registered_.count(id)) out.push_back(id);
    return out;
  };
  while (!missing().empty()) {
    const int remain = ms_until(deadline);
    if (remain <= 0) {
      std::ostringstream os;
      os << "registration timed out waiting for agent " << missing().front();
      throw std::runtime_error(os.str());
    }
    Message m;
    if (!chan_->recv(m, remain)) continue;
    if (m.kind == MsgKind::register_agent) handle_registration(m);
  }
}

void Coordinator::set_active(const std::vector<uint32_t>& ids) {
  for (uint32_t id : ids) {
    if (!problem_.find_agent(id)) {
      std::ostringstream os;
      os << "set_active: agent " << id << " not part of the problem";
      throw std::invalid_argument(os.str());
    }
  }
  active_ = std::set<uint32_t>(ids.begin(), ids.end());
}

uint32_t Coordinator::plug_in(uint32_t id) {
  if (!problem_.find_agent(id)) {
    std::ostringstream os;
    os << "plug_in: agent " << id << " not part of the problem";
    throw std::invalid_argument(os.str());
  }
  if (active_.count(id)) {
    std::ostringstream os;
    os << "plug_in: agent " << id << " already active";
    throw std::invalid_argument(os.str());
  }
  if (!registered_.count(id)) {
    std::ostringstream os;
    os << "plug_in: agent " << id << " has no registered endpoint";
    throw std::invalid_argument(os.str());
  }
  active_.insert(id);
  ++epoch_;
  Message m;
  m.kind = MsgKind::register_agent;
  m.id = id;
  m.epoch = epoch_;
  m.summary = summaries_[id];
  try {
    chan_->send(id, m);
  } catch (const std::exception&) {
  }
  for (uint32_t j : graph_neighbors(id)) {
    if (!registered_.count(j)) continue;
    try {
      chan_->send(j, m);
    } catch (const std::exception&) {
    }
  }
  return epoch_;
}

uint32_t Coordinator::plug_out(uint32_t id) {
  if (!active_.count(id)) {
    std::ostringstream os;
    os << "plug_out: agent " << id << " not active";
    throw std::invalid_argument(os.str());
  }
  active_.erase(id);
  ++epoch_;
  Message m;
  m.kind = MsgKind::deregister_agent;
  m.id = id;
  m.epoch = epoch_;
  try {
    chan_->send(id, m);
  } catch (const std::exception&) {
  }
  for (uint32_t j : graph_neighbors(id)) {
    if (!registered_.count(j)) continue;
    try {
      chan_->send(j, m);
    } catch (const std::exception&) {
    }
  }
  return epoch_;
}

void Coordinator::push_states(double t, const std::map<uint32_t, Vec>& states) {
  for (uint32_t id : active_) {
    auto own = states.find(id);
    if (own == states.end()) {
      std::ostringstream os;
      os << "push_states: no state for agent " << id;
      throw std::invalid_argument(os.str());
    }
    Message m;
    m.kind = MsgKind::state_update;
    m.to = id;
    m.t = t;
    m.states.push_back({id, own->second});
    for (uint32_t j : graph_neighbors(id)) {
      if (!active_.count(j)) continue;
      auto it = states.find(j);
      if (it != states.end()) m.states.push_back({j, it->second});
    }
    chan_->send(id, m);
  }
}

void Coordinator::broadcast(const Message& m) {
  for (uint32_t id : active_) {
    try {
      chan_->send(id, m);
    } catch (const std::exception&) {
      // the silent agent surfaces through the ack timeout
    }
  }
}

bool Coordinator::await_acks(uint32_t q, uint32_t step, std::vector<uint32_t>& missing,
                             std::map<uint32_t, bool>* flags) {
  std::set<uint32_t> waiting = active_;
  const auto deadline = Clock::now() + std::chrono::milliseconds(opt_.step_timeout_ms);
  while (!waiting.empty()) {
    const int remain = ms_until(deadline);
    if (remain <= 0) break;
    Message m;
    if (!chan_->recv(m, remain)) break;
    switch (m.kind) {
      case MsgKind::ack:
        if (!flags && m.epoch == epoch_ && m.q == q && m.step == step) waiting.erase(m.id);
        break;
      case MsgKind::convergence_flag:
        if (flags && m.epoch == epoch_ && m.q == q) {
          (*flags)[m.id] = m.flag;
          waiting.erase(m.id);
        }
        break;
      case MsgKind::register_agent:
        handle_registration(m);
        break;
      default:
        break;  // stale rounds leave acks behind; drop them
    }
  }
  missing.assign(waiting.begin(), waiting.end());
  return waiting.empty();
}

bool Coordinator::collect_results(RoundReport& rep, std::vector<uint32_t>& missing) {
  for (uint32_t id : active_) {
    Message req;
    req.kind = MsgKind::result;
    req.from = kCoordinatorId;
    req.to = id;
    try {
      chan_->send(id, req);
    } catch (const std::exception&) {
    }
  }
  std::set<uint32_t> waiting = active_;
  const auto deadline = Clock::now() + std::chrono::milliseconds(opt_.step_timeout_ms);
  while (!waiting.empty()) {
    const int remain = ms_until(deadline);
    if (remain <= 0) break;
    Message m;
    if (!chan_->recv(m, remain)) break;
    if (m.kind == MsgKind::result && waiting.count(m.from)) {
      AgentResult r;
      r.x = m.x;
      r.u = m.u;
      r.cost = m.cost;
      r.solve_ms = m.solve_ms;
      r.converged = m.flag;
      rep.agents[m.from] = std::move(r);
      waiting.erase(m.from);
    } else if (m.kind == MsgKind::register_agent) {
      handle_registration(m);
    }
  }
  missing.assign(waiting.begin(), waiting.end());
  return waiting.empty();
}

void Coordinator::reset_round(RoundReport& rep) {
  while (!active_.empty()) {
    broadcast(make_trigger(epoch_, 0, 0));
    std::vector<uint32_t> silent;
    if (await_acks(0, 0, silent, nullptr)) return;
    if (!opt_.plug_and_play) {
      std::ostringstream os;
      os << "agent " << silent.front() << " never acknowledged the round reset";
      throw std::runtime_error(os.str());
    }
    for (uint32_t id : silent) {
      plug_out(id);
      rep.dropped.push_back(id);
    }
  }
}

RoundReport Coordinator::run_round() {
  RoundReport rep;
  rep.epoch = epoch_;
  const auto t0 = Clock::now();
  if (active_.empty()) {
    rep.converged = true;
    rep.wall_ms = ms_since(t0);
    return rep;
  }

  // every attempt starts from a reset barrier so agents left mid-iteration by
  // an earlier round or a plug event line up at q = 0 again; a missed ack in
  // plug-and-play mode unplugs the silent agents and restarts the attempt
  bool done = opt_.q_max == 0;
  while (!done) {
    reset_round(rep);
    if (active_.empty()) break;
    bool aborted = false;
    for (uint32_t q = 1; q <= opt_.q_max && !aborted && !done; ++q) {
      for (uint32_t step = 1; step <= 7 && !aborted && !done; ++step) {
        broadcast(make_trigger(epoch_, q, step));
        std::vector<uint32_t> missing;
        std::map<uint32_t, bool> flags;
        if (!await_acks(q, step, missing, step == 7 ? &flags : nullptr)) {
          if (!opt_.plug_and_play) {
            std::ostringstream os;
            os << "agent " << missing.front() << " never acknowledged step " << step
               << " of iteration " << q;
            throw std::runtime_error(os.str());
          }
          for (uint32_t id : missing) {
            plug_out(id);
            rep.dropped.push_back(id);
          }
          aborted = true;
        } else if (step == 7) {
          bool all = true;
          for (uint32_t id : active_) all = all && flags.count(id) && flags.at(id);
          rep.q_used = q;
          if (all || q == opt_.q_max) {
            rep.converged = all;
            done = true;
          }
        }
      }
    }
    if (active_.empty()) break;
  }
  if (active_.empty()) rep.converged = true;

  std::vector<uint32_t> missing;
  while (!active_.empty() && !collect_results(rep, missing)) {
    if (!opt_.plug_and_play) {
      std::ostringstream os;
      os << "agent " << missing.front() << " never returned its result";
      throw std::runtime_error(os.str());
    }
    for (uint32_t id : missing) {
      plug_out(id);
      rep.dropped.push_back(id);
    }
    missing.clear();
  }
  rep.epoch = epoch_;
  rep.wall_ms = ms_since(t0);
  return rep;
}

void Coordinator::shutdown_agents() {
  Message m;
  m.kind = MsgKind::shutdown;
  for (uint32_t id : registered_) {
    try {
      chan_->send(id, m);
    } catch (const std::exception&) {
    }
  }
}

AgentRuntime::AgentRuntime(Problem problem, uint32_t id, std::shared_ptr<Channel> channel,
                           RuntimeOptions options, std::vector<uint32_t> initially_active,
                           TcpEndpoint* wire)
    : problem_(std::move(problem)),
      self_(id),
      chan_(std::move(channel)),
      opt_(std::move(options)),
      wire_(wire),
      active_set_(initially_active.begin(), initially_active.end()) {
  if (active_set_.count(self_))
    agent_ = std::make_unique<AdmmAgent>(
        make_agent_setup(subproblem(problem_, active_vec()), self_, opt_.admm));
}

std::vector<uint32_t> AgentRuntime::active_vec() const {
  return std::vector<uint32_t>(active_set_.begin(), active_set_.end());
}

bool AgentRuntime::graph_neighbor(uint32_t j) const {
  const std::vector<uint32_t> nbrs = problem_.graph().neighborhood(self_);
  return std::find(nbrs.begin(), nbrs.end(), j) != nbrs.end();
}

void AgentRuntime::register_self() {
  Message m;
  m.kind = MsgKind::register_agent;
  m.id = self_;
  m.summary = opt_.listen_address;
  chan_->send(kCoordinatorId, m);
}

void AgentRuntime::serve() {
  register_self();
  running_ = true;
  while (running_) pump(250);
}

bool AgentRuntime::pump(int timeout_ms) {
  Message m;
  if (!chan_->recv(m, timeout_ms)) {
    if (wire_) {
      for (uint32_t id : wire_->take_dropped()) {
        if (id == kCoordinatorId) running_ = false;
      }
    }
    return false;
  }
  handle(m);
  return true;
}

void AgentRuntime::handle(const Message& m) {
  switch (m.kind) {
    case MsgKind::register_agent:
    case MsgKind::deregister_agent:
      handle_plug(m);
      break;
    case MsgKind::trigger_step:
      handle_trigger(m);
      break;
    case MsgKind::local_copies:
    case MsgKind::coupling_vars:
    case MsgKind::multiplier_vals:
      if (agent_) {
        agent_->ingest(m);
        try_pending();
      }
      break;
    case MsgKind::state_update:
      handle_states(m);
      break;
    case MsgKind::result:
      send_result();
      break;
    case MsgKind::shutdown:
      running_ = false;
      break;
    default: {
      std::ostringstream os;
      os << "unexpected message kind " << static_cast<int>(m.kind) << " from " << m.from;
      errors_.push_back(os.str());
      break;
    }
  }
}

void AgentRuntime::handle_plug(const Message& m) {
  const bool in = m.kind == MsgKind::register_agent;
  if (in) {
    addresses_[m.id] = m.summary;
    // the lower id of each neighboring pair dials the higher one
    if (wire_ && self_ < m.id && graph_neighbor(m.id) && !m.summary.empty() &&
        !wire_->has_route(m.id)) {
      const auto pos = m.summary.rfind(':');
      if (pos == std::string::npos) {
        errors_.push_back("bad address: " + m.summary);
      } else {
        wire_->connect_to(m.summary.substr(0, pos),
                          static_cast<uint16_t>(std::stoi(m.summary.substr(pos + 1))));
      }
    }
  }
  if (m.epoch == 0 || m.epoch <= epoch_) return;  // address bootstrap or stale notice
  epoch_ = m.epoch;
  if (in)
    active_set_.insert(m.id);
  else
    active_set_.erase(m.id);
  if (m.id == self_) {
    if (in) {
      agent_ = std::make_unique<AdmmAgent>(
          make_agent_setup(subproblem(problem_, active_vec()), self_, opt_.admm));
      last_t_.reset();
      solve_ms_ = 0.0;
    } else {
      agent_.reset();
      pending_.reset();
      last_t_.reset();
    }
    return;
  }
  if (agent_ && graph_neighbor(m.id)) {
    rebuild();
    ++rebuild_count_;
    try_pending();
  }
}

void AgentRuntime::rebuild() {
  agent_->reconfigure(make_agent_setup(subproblem(problem_, active_vec()), self_, opt_.admm));
}

void AgentRuntime::handle_trigger(const Message& m) {
  if (m.q == 0 && m.step == 0) {  // round reset
    pending_.reset();
    if (agent_) agent_->abort_round();
    ack(m);
    return;
  }
  if (!agent_) {
    errors_.push_back("trigger received while inactive");
    return;
  }
  const auto cur = static_cast<uint32_t>(agent_->q());
  const bool in_step = m.step == 1 ? m.q == cur + 1 : m.q == cur;
  if (!in_step) {
    std::ostringstream os;
    os << "trigger for iteration " << m.q << " step " << m.step << " arrived at iteration "
       << cur;
    errors_.push_back(os.str());
    return;
  }
  if ((m.step == 3 && !agent_->ready_for_step3()) ||
      (m.step == 5 && !agent_->ready_for_step5())) {
    pending_ = m;  // payloads still in flight; finish once they arrive
    return;
  }
  run_step(m);
}

void AgentRuntime::try_pending() {
  if (!pending_ || !agent_) return;
  const Message m = *pending_;
  if (m.q != static_cast<uint32_t>(agent_->q())) {
    pending_.reset();
    return;
  }
  if (m.step == 3 && agent_->ready_for_step3()) {
    pending_.reset();
    run_step(m);
  } else if (m.step == 5 && agent_->ready_for_step5()) {
    pending_.reset();
    run_step(m);
  }
}

void AgentRuntime::run_step(const Message& m) {
  switch (m.step) {
    case 1: {
      if (m.q == 1) solve_ms_ = 0.0;
      const auto t0 = Clock::now();
      agent_->step1_solve();
      solve_ms_ += ms_since(t0);
      ack(m);
      break;
    }
    case 2:
      send_payloads(agent_->copies_out());
      ack(m);
      break;
    case 3:
      agent_->step3_update();
      ack(m);
      break;
    case 4:
      send_payloads(agent_->coupling_out());
      ack(m);
      break;
    case 5:
      agent_->step5_update();
      ack(m);
      break;
    case 6:
      send_payloads(agent_->multipliers_out());
      ack(m);
      break;
    case 7: {
      Message f;
      f.kind = MsgKind::convergence_flag;
      f.id = self_;
      f.epoch = m.epoch;
      f.q = m.q;
      f.flag = agent_->converged();
      chan_->send(kCoordinatorId, f);
      break;
    }
    default: {
      std::ostringstream os;
      os << "trigger carries unknown step " << m.step;
      errors_.push_back(os.str());
      break;
    }
  }
}

void AgentRuntime::send_payloads(std::vector<Message> ms) {
  for (Message& m : ms) {
    if (wire_ && !wire_->has_route(m.to) && !wire_->wait_route(m.to, opt_.route_timeout_ms)) {
      std::ostringstream os;
      os << "no route to agent " << m.to;
      throw std::runtime_error(os.str());
    }
    chan_->send(m.to, m);
  }
}

void AgentRuntime::ack(const Message& trigger) {
  chan_->send(kCoordinatorId, make_ack(self_, trigger.epoch, trigger.q, trigger.step));
}

void AgentRuntime::handle_states(const Message& m) {
  if (!agent_) return;
  if (last_t_ && m.t > *last_t_) agent_->shift(m.t - *last_t_);
  last_t_ = m.t;
  const Vec* own = nullptr;
  std::map<uint32_t, Vec> nbr;
  for (const auto& [id, v] : m.states) {
    if (id == self_)
      own = &v;
    else
      nbr[id] = v;
  }
  if (!own) {
    errors_.push_back("state update misses the own state");
    return;
  }
  agent_->set_states(*own, nbr);
}

void AgentRuntime::send_result() {
  Message r;
  r.kind = MsgKind::result;
  r.from = self_;
  r.to = kCoordinatorId;
  r.solve_ms = solve_ms_;
  if (agent_) {
    r.q_used = static_cast<uint32_t>(agent_->q());
    r.flag = agent_->converged();
    r.cost = agent_->local_cost();
    r.x = agent_->x();
    r.u = agent_->u();
  }
  chan_->send(kCoordinatorId, r);
}

}  // namespace dmpc
