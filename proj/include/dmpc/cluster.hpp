#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "dmpc/admm.hpp"
#include "dmpc/model.hpp"

namespace dmpc {

// Outcome of one synchronized round for a single agent.
struct AgentResult {
  Trajectory x, u;
  double cost = 0.0;
  double solve_ms = 0.0;  // local minimization wall time over the round
  bool converged = false;
};

struct RoundReport {
  uint32_t q_used = 0;
  bool converged = false;  // every agent satisfied its stop test
  uint32_t epoch = 0;
  double wall_ms = 0.0;
  std::vector<uint32_t> dropped;  // agents unplugged after missed acks
  std::map<uint32_t, AgentResult> agents;
};

struct ClusterOptions {
  AdmmOptions admm;
  uint32_t q_max = 20;
  bool parallel = false;  // OpenMP across agents inside each pass
};

/// All agents of one problem held in-process and stepped in lockstep passes:
/// every agent runs step k before any runs k+1, and the exchanged messages
/// are handed over directly in ascending sender order. The serial and the
/// OpenMP executor therefore produce identical iterates.
class LocalCluster {
public:
  LocalCluster(Problem problem, ClusterOptions options);
  LocalCluster(Problem problem, ClusterOptions options, std::vector<uint32_t> active);

  /// Distributes measured states; when time advanced since the last call all
  /// trajectories are first shifted by the difference (warm start).
  void set_states(double t, const std::map<uint32_t, Vec>& states);

  RoundReport run_round();

  uint32_t plug_in(uint32_t id);   // returns the new epoch
  uint32_t plug_out(uint32_t id);

  AdmmAgent& agent(uint32_t id);
  const AdmmAgent* find_agent(uint32_t id) const;
  std::vector<uint32_t> active() const;
  uint32_t epoch() const { return epoch_; }
  const Problem& problem() const { return problem_; }

  /// One entry per plug event: (epoch, ids whose local problem was rebuilt).
  const std::vector<std::pair<uint32_t, std::vector<uint32_t>>>& rebuild_log() const {
    return rebuild_log_;
  }

private:
  std::vector<uint32_t> active_ids() const;
  std::vector<uint32_t> rebuild_neighbors(uint32_t id);

  Problem problem_;
  ClusterOptions opt_;
  std::map<uint32_t, std::unique_ptr<AdmmAgent>> agents_;
  uint32_t epoch_ = 0;
  std::optional<double> last_t_;
  std::vector<std::pair<uint32_t, std::vector<uint32_t>>> rebuild_log_;
};

}  // namespace dmpc
