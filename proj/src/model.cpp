#include "dmpc/model.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dmpc {

void attach_quadratic_cost(AgentModel& m, const Vec& P, const Vec& Q, const Vec& R,
                           const Vec& x_des) {
  if (P.size() != m.nx || Q.size() != m.nx || R.size() != m.nu || x_des.size() != m.nx)
    throw std::invalid_argument("attach_quadratic_cost: weight dimension mismatch");
  m.P = P;
  m.Q = Q;
  m.R = R;
  m.x_des = x_des;
  m.l = [Q, R, x_des](const Vec& x, const Vec& u, double) {
    const Vec ex = x - x_des;
    return 0.5 * ex.dot(Q.cwiseProduct(ex)) + 0.5 * u.dot(R.cwiseProduct(u));
  };
  m.dldx = [Q, x_des](const Vec& x, const Vec&, double) -> Vec {
    return Q.cwiseProduct(x - x_des);
  };
  m.dldu = [R](const Vec&, const Vec& u, double) -> Vec { return R.cwiseProduct(u); };
  m.V = [P, x_des](const Vec& xT, double) {
    const Vec e = xT - x_des;
    return 0.5 * e.dot(P.cwiseProduct(e));
  };
  m.dVdx = [P, x_des](const Vec& xT, double) -> Vec { return P.cwiseProduct(xT - x_des); };
}

namespace {

template <typename F>
Mat fd_jacobian(const F& f, const Vec& at, int out_dim, double step) {
  Mat J(out_dim, at.size());
  Vec p = at;
  for (int c = 0; c < at.size(); ++c) {
    const double keep = p(c);
    p(c) = keep + step;
    const Vec hi = f(p);
    p(c) = keep - step;
    const Vec lo = f(p);
    p(c) = keep;
    J.col(c) = (hi - lo) / (2.0 * step);
  }
  return J;
}

}  // namespace

void attach_fd_jacobians(AgentModel& m, double step) {
  auto f = m.f;
  const int nx = m.nx;
  if (!m.dfdx)
    m.dfdx = [f, nx, step](const Vec& x, const Vec& u, double t) {
      return fd_jacobian([&](const Vec& p) { return f(p, u, t); }, x, nx, step);
    };
  if (!m.dfdu)
    m.dfdu = [f, nx, step](const Vec& x, const Vec& u, double t) {
      return fd_jacobian([&](const Vec& p) { return f(x, p, t); }, u, nx, step);
    };
}

void attach_fd_jacobians(CouplingModel& c, double step) {
  auto f = c.f;
  if (!c.dfdxi)
    c.dfdxi = [f, step](const Vec& xi, const Vec& ui, const Vec& xj, const Vec& uj, double t) {
      const int n = static_cast<int>(f(xi, ui, xj, uj, t).size());
      return fd_jacobian([&](const Vec& p) { return f(p, ui, xj, uj, t); }, xi, n, step);
    };
  if (!c.dfdui)
    c.dfdui = [f, step](const Vec& xi, const Vec& ui, const Vec& xj, const Vec& uj, double t) {
      const int n = static_cast<int>(f(xi, ui, xj, uj, t).size());
      return fd_jacobian([&](const Vec& p) { return f(xi, p, xj, uj, t); }, ui, n, step);
    };
  if (!c.dfdxj)
    c.dfdxj = [f, step](const Vec& xi, const Vec& ui, const Vec& xj, const Vec& uj, double t) {
      const int n = static_cast<int>(f(xi, ui, xj, uj, t).size());
      return fd_jacobian([&](const Vec& p) { return f(xi, ui, p, uj, t); }, xj, n, step);
    };
  if (!c.dfduj)
    c.dfduj = [f, step](const Vec& xi, const Vec& ui, const Vec& xj, const Vec& uj, double t) {
      const int n = static_cast<int>(f(xi, ui, xj, uj, t).size());
      return fd_jacobian([&](const Vec& p) { return f(xi, ui, xj, p, t); }, uj, n, step);
    };
}

CouplingGraph::CouplingGraph(const std::vector<uint32_t>& ids,
                             const std::vector<CouplingModel>& couplings)
    : ids_(ids) {
  std::sort(ids_.begin(), ids_.end());
  for (const auto& c : couplings) edges_.emplace_back(c.owner, c.neighbor);
}

std::vector<uint32_t> CouplingGraph::sending(uint32_t i) const {
  std::set<uint32_t> out;
  for (const auto& [owner, nb] : edges_)
    if (owner == i) out.insert(nb);
  return {out.begin(), out.end()};
}

std::vector<uint32_t> CouplingGraph::receiving(uint32_t i) const {
  std::set<uint32_t> out;
  for (const auto& [owner, nb] : edges_)
    if (nb == i) out.insert(owner);
  return {out.begin(), out.end()};
}

std::vector<uint32_t> CouplingGraph::neighborhood(uint32_t i) const {
  std::set<uint32_t> out;
  for (const auto& [owner, nb] : edges_) {
    if (owner == i) out.insert(nb);
    if (nb == i) out.insert(owner);
  }
  return {out.begin(), out.end()};
}

bool CouplingGraph::has_agent(uint32_t i) const {
  return std::binary_search(ids_.begin(), ids_.end(), i);
}

const AgentModel& Problem::agent(uint32_t id) const {
  const AgentModel* m = find_agent(id);
  if (!m) throw std::out_of_range("unknown agent id " + std::to_string(id));
  return *m;
}

const AgentModel* Problem::find_agent(uint32_t id) const {
  for (const auto& a : agents)
    if (a.id == id) return &a;
  return nullptr;
}

CouplingGraph Problem::graph() const {
  std::vector<uint32_t> ids;
  ids.reserve(agents.size());
  for (const auto& a : agents) ids.push_back(a.id);
  return CouplingGraph(ids, couplings);
}

std::vector<const CouplingModel*> Problem::couplings_owned_by(uint32_t id) const {
  std::vector<const CouplingModel*> out;
  for (const auto& c : couplings)
    if (c.owner == id) out.push_back(&c);
  return out;
}

std::vector<const CouplingModel*> Problem::couplings_involving(uint32_t id) const {
  std::vector<const CouplingModel*> out;
  for (const auto& c : couplings)
    if (c.owner == id || c.neighbor == id) out.push_back(&c);
  return out;
}

namespace {

void check_dim(std::vector<std::string>& errs, const std::string& what, long got, long want) {
  if (got != want) {
    std::ostringstream os;
    os << what << ": expected " << want << ", got " << got;
    errs.push_back(os.str());
  }
}

}  // namespace

std::vector<std::string> validate(const Problem& p) {
  std::vector<std::string> errs;
  if (p.T <= 0.0) errs.push_back("horizon T must be positive");
  if (p.N < 2) errs.push_back("grid needs at least 2 points");

  std::set<uint32_t> seen;
  for (const auto& a : p.agents) {
    const std::string tag = "agent " + std::to_string(a.id);
    if (a.id == 0) errs.push_back(tag + ": id 0 is reserved for the coordinator");
    if (!seen.insert(a.id).second) errs.push_back(tag + ": duplicate id");
    if (a.nx <= 0) errs.push_back(tag + ": nx must be positive");
    if (a.nu < 0) errs.push_back(tag + ": nu must be non-negative");
    if (!a.f || !a.l || !a.V) {
      errs.push_back(tag + ": missing f, l or V callback");
      continue;
    }
    if (!a.dfdx || !a.dfdu || !a.dldx || !a.dldu || !a.dVdx)
      errs.push_back(tag + ": missing derivative callbacks");
    check_dim(errs, tag + " x0", a.x0.size(), a.nx);
    check_dim(errs, tag + " u_min", a.u_min.size(), a.nu);
    check_dim(errs, tag + " u_max", a.u_max.size(), a.nu);
    for (int c = 0; c < a.nu; ++c)
      if (a.u_min.size() == a.nu && a.u_max.size() == a.nu && a.u_min(c) > a.u_max(c))
        errs.push_back(tag + ": u_min exceeds u_max in component " + std::to_string(c));
    if (a.x0.size() != a.nx) continue;

    const Vec u = Vec::Zero(a.nu);
    try {
      check_dim(errs, tag + " f(x0)", a.f(a.x0, u, 0.0).size(), a.nx);
      if (a.dfdx) {
        const Mat A = a.dfdx(a.x0, u, 0.0);
        check_dim(errs, tag + " dfdx rows", A.rows(), a.nx);
        check_dim(errs, tag + " dfdx cols", A.cols(), a.nx);
      }
      if (a.dfdu) {
        const Mat B = a.dfdu(a.x0, u, 0.0);
        check_dim(errs, tag + " dfdu rows", B.rows(), a.nx);
        check_dim(errs, tag + " dfdu cols", B.cols(), a.nu);
      }
      if (a.dldx) check_dim(errs, tag + " dldx", a.dldx(a.x0, u, 0.0).size(), a.nx);
      if (a.dldu) check_dim(errs, tag + " dldu", a.dldu(a.x0, u, 0.0).size(), a.nu);
      if (a.dVdx) check_dim(errs, tag + " dVdx", a.dVdx(a.x0, p.T).size(), a.nx);
      if (a.ng > 0 && !a.g) errs.push_back(tag + ": ng > 0 but g missing");
      if (a.g && a.ng > 0) {
        check_dim(errs, tag + " g", a.g(a.x0, u, 0.0).size(), a.ng);
        if (a.dgdx) check_dim(errs, tag + " dgdx rows", a.dgdx(a.x0, u, 0.0).rows(), a.ng);
      }
      if (a.nh > 0 && !a.h) errs.push_back(tag + ": nh > 0 but h missing");
      if (a.h && a.nh > 0) {
        check_dim(errs, tag + " h", a.h(a.x0, u, 0.0).size(), a.nh);
        if (a.dhdx) check_dim(errs, tag + " dhdx rows", a.dhdx(a.x0, u, 0.0).rows(), a.nh);
      }
    } catch (const std::exception& e) {
      errs.push_back(tag + ": callback threw: " + std::string(e.what()));
    }
  }

  for (const auto& c : p.couplings) {
    std::ostringstream os;
    os << "coupling " << c.owner << "<-" << c.neighbor;
    const std::string tag = os.str();
    const AgentModel* ai = p.find_agent(c.owner);
    const AgentModel* aj = p.find_agent(c.neighbor);
    if (!ai || !aj) {
      errs.push_back(tag + ": references unknown agent");
      continue;
    }
    if (c.owner == c.neighbor) {
      errs.push_back(tag + ": self coupling not allowed");
      continue;
    }
    if (!c.f) {
      errs.push_back(tag + ": missing f callback");
      continue;
    }
    if (!c.dfdxi || !c.dfdui || !c.dfdxj || !c.dfduj)
      errs.push_back(tag + ": missing derivative callbacks");
    if (ai->x0.size() != ai->nx || aj->x0.size() != aj->nx) continue;
    const Vec ui = Vec::Zero(ai->nu), uj = Vec::Zero(aj->nu);
    try {
      check_dim(errs, tag + " f", c.f(ai->x0, ui, aj->x0, uj, 0.0).size(), ai->nx);
      if (c.dfdxi) {
        const Mat J = c.dfdxi(ai->x0, ui, aj->x0, uj, 0.0);
        check_dim(errs, tag + " dfdxi rows", J.rows(), ai->nx);
        check_dim(errs, tag + " dfdxi cols", J.cols(), ai->nx);
      }
      if (c.dfdxj) {
        const Mat J = c.dfdxj(ai->x0, ui, aj->x0, uj, 0.0);
        check_dim(errs, tag + " dfdxj rows", J.rows(), ai->nx);
        check_dim(errs, tag + " dfdxj cols", J.cols(), aj->nx);
      }
      if (c.dfduj) check_dim(errs, tag + " dfduj cols", c.dfduj(ai->x0, ui, aj->x0, uj, 0.0).cols(), aj->nu);
      if (c.ng > 0 && c.g)
        check_dim(errs, tag + " g", c.g(ai->x0, ui, aj->x0, uj, 0.0).size(), c.ng);
      if (c.nh > 0 && c.h)
        check_dim(errs, tag + " h", c.h(ai->x0, ui, aj->x0, uj, 0.0).size(), c.nh);
    } catch (const std::exception& e) {
      errs.push_back(tag + ": callback threw: " + std::string(e.what()));
    }
  }
  return errs;
}

Problem subproblem(const Problem& p, const std::vector<uint32_t>& keep) {
  const std::set<uint32_t> s(keep.begin(), keep.end());
  Problem r;
  r.T = p.T;
  r.N = p.N;
  for (const AgentModel& a : p.agents)
    if (s.count(a.id)) r.agents.push_back(a);
  for (const CouplingModel& c : p.couplings)
    if (s.count(c.owner) && s.count(c.neighbor)) r.couplings.push_back(c);
  return r;
}

}  // namespace dmpc
