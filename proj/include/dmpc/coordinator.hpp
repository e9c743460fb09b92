#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dmpc/cluster.hpp"
#include "dmpc/comm.hpp"
#include "dmpc/tcp.hpp"

namespace dmpc {

/// Agents address the coordinator's endpoint by this id.
constexpr uint32_t kCoordinatorId = 0;

struct CoordinatorOptions {
  uint32_t q_max = 20;
  int step_timeout_ms = 10000;  // per barrier step
  bool plug_and_play = false;   // unplug silent agents and rerun instead of failing
};

/// Synchronizes agents through barrier-stepped rounds over a Channel: every
/// step of the iteration is triggered on all active agents and the next
/// trigger only goes out once all acknowledgments arrived. Registry changes
/// happen between rounds; a missed ack in plug-and-play mode unplugs the
/// silent agent and the round restarts with the survivors.
class Coordinator {
public:
  Coordinator(Problem problem, std::shared_ptr<Channel> channel, CoordinatorOptions options);

  /// Collects registrations until every expected agent sent one, forwarding
  /// each registration to the registrant's graph neighbors so they can open
  /// direct connections. Throws when the timeout passes first.
  void await_registrations(const std::vector<uint32_t>& expected, int timeout_ms);

  /// Declares the initially active agents without sending notifications.
  void set_active(const std::vector<uint32_t>& ids);

  uint32_t plug_in(uint32_t id);   // notifies direct neighbors, returns the new epoch
  uint32_t plug_out(uint32_t id);

  /// Sends every active agent its own and its neighbors' measured states.
  void push_states(double t, const std::map<uint32_t, Vec>& states);

  RoundReport run_round();

  void shutdown_agents();

  uint32_t epoch() const { return epoch_; }
  const std::set<uint32_t>& active() const { return active_; }
  const std::set<uint32_t>& registered() const { return registered_; }
  const Problem& problem() const { return problem_; }

private:
  void broadcast(const Message& m);
  /// Barrier that returns every active agent to q = 0, dropping silent ones
  /// when plug and play is on.
  void reset_round(RoundReport& rep);
  /// Waits for one matching ack (or convergence flag) per active agent.
  /// Returns false on timeout with the silent agents in `missing`.
  bool await_acks(uint32_t q, uint32_t step, std::vector<uint32_t>& missing,
                  std::map<uint32_t, bool>* flags);
  bool collect_results(RoundReport& rep, std::vector<uint32_t>& missing);
  void handle_registration(const Message& m);
  std::vector<uint32_t> graph_neighbors(uint32_t id) const;

  Problem problem_;
  std::shared_ptr<Channel> chan_;
  CoordinatorOptions opt_;
  CouplingGraph graph_;  // full problem graph
  std::set<uint32_t> registered_;
  std::map<uint32_t, std::string> summaries_;
  std::set<uint32_t> active_;
  uint32_t epoch_ = 0;
};

struct RuntimeOptions {
  AdmmOptions admm;
  int route_timeout_ms = 10000;  // wait for direct connections before payload sends
  std::string listen_address;    // host:port handed to peers, empty on the bus
};

/// Agent-side message loop: registers with the coordinator, executes trigger
/// steps on its AdmmAgent, exchanges payloads directly with neighbors, and
/// follows plug notifications by rebuilding the local problem. The same loop
/// serves the in-process bus and TCP.
class AgentRuntime {
public:
  AgentRuntime(Problem problem, uint32_t id, std::shared_ptr<Channel> channel,
               RuntimeOptions options, std::vector<uint32_t> initially_active,
               TcpEndpoint* wire = nullptr);

  void register_self();
  /// register_self, then pump until a shutdown message arrives.
  void serve();
  /// Handles one inbound message; false on timeout.
  bool pump(int timeout_ms);

  bool active() const { return agent_ != nullptr; }
  uint32_t id() const { return self_; }
  const AdmmAgent* agent() const { return agent_.get(); }
  uint32_t rebuild_count() const { return rebuild_count_; }
  uint32_t epoch() const { return epoch_; }
  const std::vector<std::string>& errors() const { return errors_; }

private:
  void handle(const Message& m);
  void handle_trigger(const Message& m);
  void run_step(const Message& m);
  void try_pending();
  void send_payloads(std::vector<Message> ms);
  void ack(const Message& trigger);
  void handle_plug(const Message& m);
  void handle_states(const Message& m);
  void send_result();
  void rebuild();
  std::vector<uint32_t> active_vec() const;
  bool graph_neighbor(uint32_t j) const;

  Problem problem_;
  uint32_t self_;
  std::shared_ptr<Channel> chan_;
  RuntimeOptions opt_;
  TcpEndpoint* wire_ = nullptr;
  std::set<uint32_t> active_set_;
  std::map<uint32_t, std::string> addresses_;
  std::unique_ptr<AdmmAgent> agent_;
  std::optional<Message> pending_;  // deferred trigger awaiting payloads
  std::optional<double> last_t_;
  double solve_ms_ = 0.0;
  uint32_t epoch_ = 0;
  uint32_t rebuild_count_ = 0;
  bool running_ = false;
  std::vector<std::string> errors_;
};

}  // namespace dmpc
