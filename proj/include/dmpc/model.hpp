#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Continuous-time subsystem x_i' = f_i(x_i, u_i, t) plus isolated cost and
/// constraints. Couplings to other agents live in CouplingModel.
struct AgentModel {
  uint32_t id = 0;
  int nx = 0;
  int nu = 0;

  Vec x0;
  Vec u_min, u_max;  // +-inf where unbounded

  std::function<Vec(const Vec& x, const Vec& u, double t)> f;
  std::function<Mat(const Vec& x, const Vec& u, double t)> dfdx;  // nx x nx
  std::function<Mat(const Vec& x, const Vec& u, double t)> dfdu;  // nx x nu

  std::function<double(const Vec& x, const Vec& u, double t)> l;
  std::function<Vec(const Vec& x, const Vec& u, double t)> dldx;
  std::function<Vec(const Vec& x, const Vec& u, double t)> dldu;
  std::function<double(const Vec& xT, double T)> V;
  std::function<Vec(const Vec& xT, double T)> dVdx;

  int ng = 0;  // equality constraints g(x,u,t) = 0
  int nh = 0;  // inequality constraints h(x,u,t) <= 0
  std::function<Vec(const Vec& x, const Vec& u, double t)> g;
  std::function<Mat(const Vec& x, const Vec& u, double t)> dgdx;
  std::function<Mat(const Vec& x, const Vec& u, double t)> dgdu;
  std::function<Vec(const Vec& x, const Vec& u, double t)> h;
  std::function<Mat(const Vec& x, const Vec& u, double t)> dhdx;
  std::function<Mat(const Vec& x, const Vec& u, double t)> dhdu;

  // factory identity, kept so the model can be rebuilt from a wire summary
  std::string model_key;
  nlohmann::json params;

  // diagonal cost weights retained for summaries and neighbor cost evaluation
  Vec P, Q, R;
  Vec x_des;
};

/// Additive coupling term f_ij(x_i, u_i, x_j, u_j, t) entering the owner's
/// dynamics; the neighbor j is a sending neighbor of the owner i.
struct CouplingModel {
  uint32_t owner = 0;
  uint32_t neighbor = 0;

  std::function<Vec(const Vec& xi, const Vec& ui, const Vec& xj, const Vec& uj, double t)> f;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dfdxi;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dfdui;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dfdxj;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dfduj;

  int ng = 0;
  int nh = 0;
  std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&, double)> g;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dgdxi, dgdui, dgdxj, dgduj;
  std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&, double)> h;
  std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&, double)> dhdxi, dhdui, dhdxj, dhduj;

  std::string model_key;
  nlohmann::json params;
};

/// Attaches l, V and their gradients built from diagonal weights:
/// l = 1/2 |x - x_des|^2_Q + 1/2 |u|^2_R, V = 1/2 |x(T) - x_des|^2_P.
void attach_quadratic_cost(AgentModel& m, const Vec& P, const Vec& Q, const Vec& R,
                           const Vec& x_des);

/// Fills absent dynamics Jacobians with central finite differences of f.
void attach_fd_jacobians(AgentModel& m, double step = 1e-6);
void attach_fd_jacobians(CouplingModel& c, double step = 1e-6);

/// Directed coupling structure over a set of agents.
class CouplingGraph {
public:
  CouplingGraph() = default;
  CouplingGraph(const std::vector<uint32_t>& ids, const std::vector<CouplingModel>& couplings);

  /// Sending neighbors of i: j such that f_ij exists (j's variables enter i).
  std::vector<uint32_t> sending(uint32_t i) const;
  /// Receiving neighbors of i: j such that f_ji exists.
  std::vector<uint32_t> receiving(uint32_t i) const;
  /// Union of sending and receiving neighbors, sorted.
  std::vector<uint32_t> neighborhood(uint32_t i) const;

  bool has_agent(uint32_t i) const;
  const std::vector<uint32_t>& ids() const { return ids_; }

private:
  std::vector<uint32_t> ids_;
  std::vector<std::pair<uint32_t, uint32_t>> edges_;  // (owner, neighbor)
};

/// Whole-problem description shared by every process.
struct Problem {
  std::vector<AgentModel> agents;
  std::vector<CouplingModel> couplings;
  double T = 1.0;  // prediction horizon
  int N = 11;      // grid points per horizon

  const AgentModel& agent(uint32_t id) const;
  const AgentModel* find_agent(uint32_t id) const;
  CouplingGraph graph() const;
  std::vector<const CouplingModel*> couplings_owned_by(uint32_t id) const;
  std::vector<const CouplingModel*> couplings_involving(uint32_t id) const;
};

/// Structural checks: unique ids, endpoint existence, callback presence,
/// dimension consistency of every callback evaluated at x0, bound sanity.
std::vector<std::string> validate(const Problem& p);

/// Restriction to the given agents: keeps their models and every coupling
/// whose both endpoints are kept. Horizon settings carry over.
Problem subproblem(const Problem& p, const std::vector<uint32_t>& keep);

}  // namespace dmpc
