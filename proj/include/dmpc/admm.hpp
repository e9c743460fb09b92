#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "dmpc/comm.hpp"
#include "dmpc/grad_solver.hpp"
#include "dmpc/model.hpp"
#include "dmpc/ocp.hpp"
#include "dmpc/trajectory.hpp"

namespace dmpc {

/// Parameters of the consensus iteration run by each agent.
struct AdmmOptions {
  double rho0 = 1.0;  // initial penalty for every consensus element
  double eps = 1e-2;  // convergence threshold on |[dz; dmu]|, checked per agent
  bool sup_norm = false;  // use the sup-in-time norm instead of discrete L2

  bool adapt_penalties = false;
  double gamma_min = 0.5;          // slowest per-iteration penalty rescale
  double gamma_max = 2.0;          // fastest per-iteration penalty rescale
  double adapt_threshold = 1e-10;  // |s| at or below this freezes the element
  double rho_min = 1e-4;
  double rho_max = 1e6;

  bool approximate_cost = false;        // weigh neighbor objectives into the local one
  bool approximate_dynamics = false;    // integrate neighbor copies locally
  bool approximate_constraints = false; // enforce neighbor constraints on copies

  SolverConfig solver;  // inner minimization
};

inline bool any_approximation(const AdmmOptions& o) {
  return o.approximate_cost || o.approximate_dynamics || o.approximate_constraints;
}

/// Everything one agent needs to run its side of the iteration.
struct AgentSetup {
  double T = 1.0;
  int N = 11;
  AgentModel model;
  std::map<uint32_t, AgentModel> neighbor_models;  // keyed by neighbor id
  std::vector<CouplingModel> couplings_out;        // own dynamics terms
  std::vector<CouplingModel> couplings_in;         // terms neighbors own
  std::map<uint32_t, int> neighbor_degree;         // neighborhood sizes, for cost weights
  AdmmOptions options;
};

/// Extracts the single-agent view of a whole problem.
AgentSetup make_agent_setup(const Problem& p, uint32_t id, const AdmmOptions& options);

/// One diagnostics row per completed iteration.
struct AdmmIterStats {
  int q = 0;
  double local_cost = 0.0;  // plain objective of the own trajectory
  double r_norm = 0.0;      // primal residual: actuals minus consensus values
  double s_norm = 0.0;      // dual residual: penalty times consensus change
  double conv_norm = 0.0;   // |[dz; dmu]| used by the stop test
  double rho_lo = 0.0, rho_hi = 0.0;
  int solver_iterations = 0;
};

/// One agent of the consensus iteration. The caller sequences the steps and
/// moves the messages; the agent itself never touches a channel, so the same
/// object runs under the in-process executor, over TCP, and in unit tests.
///
/// Per iteration: step1_solve minimizes the local problem, copies_out hands
/// the updated neighbor copies to their owners, step3_update averages the
/// received copies into the own consensus trajectory, coupling_out distributes
/// it back, step5_update advances the multipliers (and penalties), and
/// multipliers_out returns the copy-side multipliers to the owners.
class AdmmAgent {
public:
  explicit AdmmAgent(AgentSetup setup);

  uint32_t id() const { return setup_.model.id; }
  int q() const { return q_; }
  const AgentSetup& setup() const { return setup_; }
  const OcpInstance& instance() const { return inst_; }

  // closed-loop plumbing
  void set_states(const Vec& own, const std::map<uint32_t, Vec>& neighbors);
  void shift(double dt);  // warm start for the next sampling step
  void reset();           // cold start: fresh consensus values and penalties
  void reconfigure(AgentSetup setup);  // keeps state of surviving neighbors

  // one iteration, driven by the round executor
  void step1_solve();
  std::vector<Message> copies_out() const;
  void ingest(const Message& m);
  void step3_update();
  std::vector<Message> coupling_out() const;
  void step5_update();
  std::vector<Message> multipliers_out() const;
  double convergence_norm() const { return conv_norm_; }
  bool converged() const { return q_ > 0 && conv_norm_ <= setup_.options.eps; }

  // true once every inbound payload the step depends on has been ingested;
  // round executors poll these instead of racing the transport
  bool ready_for_step3() const;
  bool ready_for_step5() const;
  /// Drops the current iteration counters so a fresh round can start without
  /// touching consensus values, multipliers or penalties.
  void abort_round();

  // results
  const Trajectory& x() const { return x_; }
  const Trajectory& u() const { return u_; }
  double local_cost() const;
  const std::vector<AdmmIterStats>& stats() const { return stats_; }

  // block state, exposed for tests and logging
  struct OwnSide {
    Trajectory zx, zu, zx_prev, zu_prev;
    Trajectory mu_x, mu_u, mu_x_prev, mu_u_prev;
    Trajectory rho_x, rho_u;
  };
  /// Copies of neighbor j's trajectories held by this agent.
  struct CopyHeld {
    Trajectory cx, cu, cv;               // the copies themselves
    Trajectory zx, zu, zx_prev, zu_prev; // j's consensus values, received
    Trajectory zv, zv_prev;
    Trajectory mu_x, mu_u, mu_v;         // copy-side multipliers (ours)
    Trajectory mu_x_prev, mu_u_prev, mu_v_prev;
    Trajectory rho_x, rho_u, rho_v;      // copy-side penalties (ours)
    int q_z = 0;                         // iteration of the last received z
  };
  /// A neighbor's copies of this agent's trajectories, plus that neighbor's
  /// multipliers and a deterministic mirror of its penalties.
  struct CopyMirror {
    Trajectory cx, cu;
    Trajectory mu_x, mu_u;
    Trajectory rho_x, rho_u;
    int q_copies = 0;
    int q_mu = 0;
  };
  /// Consensus over the external influence this agent exerts on neighbor j
  /// (the coupling sum with j excluded). Only used when the dynamics of
  /// neighbors are approximated.
  struct InfluenceOwn {
    Trajectory vfun;          // influence evaluated on the current iterate
    Trajectory z, z_prev;
    Trajectory mu, mu_prev;   // own-side multiplier
    Trajectory rho;           // own-side penalty
    Trajectory vbar, mu_recv; // the neighbor's copy and multiplier
    Trajectory rho_mirror;    // deterministic mirror of the neighbor's penalty
    int q_vbar = 0;
    int q_mu = 0;
  };

  const OwnSide& own() const { return own_; }
  const CopyHeld& held(uint32_t j) const { return held_.at(j); }
  const CopyMirror& mirror(uint32_t j) const { return mirror_.at(j); }
  const InfluenceOwn& influence(uint32_t j) const { return infl_.at(j); }
  const std::vector<uint32_t>& copy_ids() const { return copy_ids_; }
  const std::vector<uint32_t>& holder_ids() const { return holder_ids_; }

private:
  struct Edge {  // per-neighbor view used by the instance closures
    uint32_t id = 0;
    const AgentModel* model = nullptr;
    int nx = 0, nu = 0;
    int cx = -1, cu = -1, cv = -1;  // offsets in the packed control vector
    int sx = -1;                    // offset in the packed state vector
    double eta = 1.0;
    bool sending = false;  // the neighbor's variables enter our dynamics
    std::vector<const CouplingModel*> out;  // our terms with this neighbor
    std::vector<const CouplingModel*> in;   // the neighbor's terms with us
  };

  void build_layout();
  void build_instance();
  void refresh_x0();
  void init_blocks();
  void pack_initial(Trajectory& u_init) const;
  void unpack_solution(const SolveResult& r);
  void refresh_influences();
  Trajectory influence_at(uint32_t skip) const;
  void adapt_all();
  void record_stats(int solver_iterations);

  AgentSetup setup_;
  bool approx_ = false;       // any approximation switch set
  bool approx_dyn_ = false;   // neighbor dynamics integrated locally
  std::vector<uint32_t> copy_ids_, holder_ids_, send_ids_, recv_ids_;
  std::vector<Edge> edges_;   // aligned with copy_ids_
  std::map<uint32_t, int> edge_index_;
  int x_dim_ = 0, u_dim_ = 0;
  double eta_self_ = 1.0;

  OcpInstance inst_;
  std::unique_ptr<GradSolver> solver_;
  AugLagState al_;

  Trajectory x_, u_;  // own trajectories on the grid
  OwnSide own_;
  std::map<uint32_t, CopyHeld> held_;
  std::map<uint32_t, CopyMirror> mirror_;
  std::map<uint32_t, InfluenceOwn> infl_;
  Vec x0_self_;
  std::map<uint32_t, Vec> x0_nbr_;

  int q_ = 0;
  double conv_norm_ = 0.0;
  int last_solver_iterations_ = 0;
  std::vector<AdmmIterStats> stats_;
};

}  // namespace dmpc
