#pragma once

#include "dmpc/ocp.hpp"
#include "dmpc/trajectory.hpp"

namespace dmpc {

enum class Integrator { rk4, heun };

struct SolverConfig {
  int max_gradient_iterations = 200;
  int max_multiplier_iterations = 6;
  double rel_cost_tol = 1e-8;      // inner stop: relative cost decrease
  double constraint_tol = 1e-5;    // outer stop: max violation
  double c0 = 10.0;                // initial constraint penalty
  double c_growth = 10.0;
  double c_max = 1e6;
  double viol_decrease = 0.5;      // required per-outer-iteration violation drop
  double alpha0 = 1.0;
  double alpha_min = 1e-12;
  double alpha_max = 1e8;
  double armijo_sigma = 1e-4;
  double backtrack = 0.5;
  Integrator integrator = Integrator::rk4;
};

/// Equality/inequality multiplier estimates and penalties on the grid.
struct AugLagState {
  Trajectory nu_g, c_g;  // N x ng
  Trajectory nu_h, c_h;  // N x nh
  Eigen::VectorXd prev_viol_g, prev_viol_h;  // per-component sup over the grid
  bool initialized = false;
};

struct BackwardResult {
  Trajectory lambda;   // costate, N x nx; terminal row equals dV/dx exactly
  Trajectory grad_u;   // exact gradient of the discrete augmented cost, N x nu
};

struct SolveResult {
  Trajectory x, u;
  double cost = 0.0;       // V + int l of the instance
  double aug_cost = 0.0;   // cost plus multiplier/penalty terms
  double max_violation = 0.0;
  int gradient_iterations = 0;
  int multiplier_iterations = 0;
  bool converged = false;
  bool stalled = false;
};

struct HamiltonianEval {
  double H = 0.0;
  Eigen::VectorXd Hx, Hu;
};

/// l + lambda^T f plus equality terms nu^T g + 1/2 |g|^2_c and the
/// continuously-differentiable penalty for h <= 0 (active where h + nu/c > 0).
HamiltonianEval hamiltonian(const OcpInstance& ocp, double t, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& nu_g, const Eigen::VectorXd& c_g,
                            const Eigen::VectorXd& nu_h, const Eigen::VectorXd& c_h);

class GradSolver {
public:
  GradSolver(OcpInstance ocp, SolverConfig cfg);

  const OcpInstance& ocp() const { return ocp_; }
  const SolverConfig& config() const { return cfg_; }

  /// Integrates the dynamics from ocp.x0 under u with the configured scheme.
  Trajectory forward(const Trajectory& u) const;

  /// Instance objective V + int l (no constraint terms); +inf if non-finite.
  double cost(const Trajectory& x, const Trajectory& u) const;

  /// Objective plus multiplier and penalty terms from the given state.
  double augmented_cost(const Trajectory& x, const Trajectory& u, const AugLagState& al) const;

  /// Exact adjoint of the discretized augmented cost. lambda's terminal row
  /// is dV/dx; grad_u matches finite differences of augmented_cost(forward(u), u)
  /// to round-off.
  BackwardResult backward(const Trajectory& x, const Trajectory& u, const AugLagState& al) const;

  /// Componentwise clamp into [u_min, u_max].
  Trajectory project(Trajectory u) const;

  /// Projected gradient descent with Armijo backtracking on the augmented cost.
  SolveResult projected_gradient_solve(const Trajectory& u_init, const AugLagState& al) const;

  /// Outer multiplier updates around projected_gradient_solve; `al` is carried
  /// state and is updated in place (warm-startable across calls).
  SolveResult solve(const Trajectory& u_init, AugLagState& al) const;
  SolveResult solve(const Trajectory& u_init) const;

  AugLagState make_al_state() const;

  /// Constraint violation sup per component along (x, u).
  void violations(const Trajectory& x, const Trajectory& u, Eigen::VectorXd& viol_g,
                  Eigen::VectorXd& viol_h) const;

private:
  void stage_cost_grad(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       const AugLagState& al, Eigen::VectorXd& Lx, Eigen::VectorXd& Lu) const;
  double stage_cost(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                    const AugLagState& al) const;

  OcpInstance ocp_;
  SolverConfig cfg_;
};

/// Fixed-step RK4 on x' = f(t, x) over [t0, t1].
Eigen::VectorXd integrate_ode(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
    Eigen::VectorXd x, double t0, double t1, int substeps);

}  // namespace dmpc
