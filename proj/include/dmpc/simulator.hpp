#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmpc/cluster.hpp"
#include "dmpc/coordinator.hpp"
#include "dmpc/grad_solver.hpp"
#include "dmpc/model.hpp"

namespace dmpc {

/// Offsets of each agent's blocks inside the stacked state and control.
struct StackLayout {
  std::vector<uint32_t> ids;  // problem order
  std::map<uint32_t, int> x_off, u_off;
  int nx_total = 0, nu_total = 0;
};

StackLayout make_stack_layout(const Problem& p);

/// The whole system as one OCP: states and controls of every agent stacked,
/// couplings added into their owner's block, costs and constraints summed
/// and stacked. Solving it yields the benchmark the distributed iteration
/// is measured against.
OcpInstance make_central_instance(const Problem& p);

/// Open-loop predictions returned by one controller invocation.
struct ControlStep {
  std::map<uint32_t, AgentResult> agents;
  double predicted_cost = 0.0;  // sum of the agents' objectives
  uint32_t iterations = 0;      // consensus iterations, or gradient iterations
  bool converged = false;
  uint32_t epoch = 0;  // registry version of round-based controllers
  double wall_ms = 0.0;
};

/// Computes the control trajectories applied between sampling instants.
/// Plug calls arrive only at sampling boundaries.
class Controller {
public:
  virtual ~Controller() = default;
  virtual ControlStep step(double t, const std::map<uint32_t, Vec>& states) = 0;
  virtual std::vector<uint32_t> active() const = 0;
  virtual void plug_in(uint32_t id);   // throws unless overridden
  virtual void plug_out(uint32_t id);  // throws unless overridden
};

/// Solves the stacked problem with the projected gradient method, warm
/// starting controls and multiplier estimates from the previous step.
class CentralController : public Controller {
public:
  CentralController(Problem problem, SolverConfig config);

  ControlStep step(double t, const std::map<uint32_t, Vec>& states) override;
  std::vector<uint32_t> active() const override;
  void plug_in(uint32_t id) override;
  void plug_out(uint32_t id) override;

private:
  void rebuild();

  Problem full_;
  std::vector<uint32_t> active_;
  SolverConfig cfg_;
  Problem sub_;
  StackLayout lay_;
  OcpInstance inst_;
  Trajectory u_warm_;
  AugLagState al_;
  std::optional<double> last_t_;
};

/// The consensus iteration run in process by a LocalCluster.
/// One ADMM diagnostics row of one agent at one sampling instant.
struct AdmmStatRow {
  double t = 0.0;
  uint32_t id = 0;
  AdmmIterStats s;
};

class ClusterController : public Controller {
public:
  ClusterController(Problem problem, ClusterOptions options);
  ClusterController(Problem problem, ClusterOptions options, std::vector<uint32_t> active);

  ControlStep step(double t, const std::map<uint32_t, Vec>& states) override;
  std::vector<uint32_t> active() const override { return cluster_.active(); }
  void plug_in(uint32_t id) override { cluster_.plug_in(id); }
  void plug_out(uint32_t id) override { cluster_.plug_out(id); }

  LocalCluster& cluster() { return cluster_; }
  /// Per-iteration agent diagnostics of every round run so far.
  const std::vector<AdmmStatRow>& admm_log() const { return admm_log_; }

private:
  LocalCluster cluster_;
  std::vector<AdmmStatRow> admm_log_;
};

/// Adapter over a Coordinator whose agents run elsewhere (threads or
/// processes); the caller keeps ownership of the coordinator.
class CoordinatorController : public Controller {
public:
  explicit CoordinatorController(Coordinator& coordinator) : coord_(coordinator) {}

  ControlStep step(double t, const std::map<uint32_t, Vec>& states) override;
  std::vector<uint32_t> active() const override;
  void plug_in(uint32_t id) override { coord_.plug_in(id); }
  void plug_out(uint32_t id) override { coord_.plug_out(id); }

private:
  Coordinator& coord_;
};

/// Attach or detach an agent at the first sampling boundary at or after t.
struct PlugEvent {
  double t = 0.0;
  bool attach = true;
  uint32_t id = 0;
};

struct SimOptions {
  double dt = 0.1;         // sampling interval
  int steps = 10;          // closed-loop steps
  int plant_substeps = 32; // integrator substeps per interval
  double blowup = 1e9;     // abort once any state magnitude passes this
  bool keep_predictions = false;  // retain open-loop trajectories per step
  std::vector<PlugEvent> events;
  std::string csv_dir;     // write states/controls/steps files when set
};

struct SimStepLog {
  double t = 0.0;
  uint32_t iterations = 0;
  bool converged = false;
  uint32_t epoch = 0;
  double predicted_cost = 0.0;
  double stage_cost = 0.0;  // closed-loop cost accrued over this interval
  double wall_ms = 0.0;     // controller time
  std::map<uint32_t, Vec> states;    // at the start of the interval
  std::map<uint32_t, Vec> controls;  // applied at the start of the interval
  std::map<uint32_t, double> solve_ms;
  std::map<uint32_t, Trajectory> predicted_x, predicted_u;  // if kept
};

struct SimResult {
  std::vector<SimStepLog> steps;
  std::map<uint32_t, Trajectory> x_cl;  // closed-loop states on the boundaries
  std::map<uint32_t, Trajectory> u_cl;  // applied controls, last row repeated
  double closed_loop_cost = 0.0;        // accumulated stage cost
  bool aborted = false;
  std::string abort_reason;
};

/// Closed loop around the exact coupled dynamics: every sampling step the
/// controller predicts, the first control segment is applied, and the plant
/// integrates all attached agents including their couplings. Detached agents
/// hold their state and rejoin from it.
class Simulator {
public:
  Simulator(Problem problem, SimOptions options);

  SimResult run(Controller& controller);

  const Problem& problem() const { return problem_; }

private:
  Problem problem_;
  SimOptions opt_;
};

}  // namespace dmpc
