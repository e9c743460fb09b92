#include "dmpc/admm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dmpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Vec lower_bounds(const AgentModel& m) {
  return m.u_min.size() == m.nu ? m.u_min : Vec::Constant(m.nu, -kInf);
}

Vec upper_bounds(const AgentModel& m) {
  return m.u_max.size() == m.nu ? m.u_max : Vec::Constant(m.nu, kInf);
}

// Zero clamped into the control box; used as the initial guess everywhere.
Vec rest_control(const AgentModel& m) {
  Vec lo = lower_bounds(m), hi = upper_bounds(m);
  Vec v = Vec::Zero(m.nu);
  for (int c = 0; c < m.nu; ++c) v(c) = std::min(std::max(0.0, lo(c)), hi(c));
  return v;
}

std::vector<uint32_t> sorted_unique(std::set<uint32_t> s) {
  return std::vector<uint32_t>(s.begin(), s.end());
}

void accumulate_sq(double& acc, const Trajectory& a, const Trajectory& b) {
  acc += (a.values() - b.values()).squaredNorm();
}

// One constraint group stacked into the local problem.
struct ConsBlock {
  int rows = 0;
  std::function<void(double, const Vec&, const Vec&, Eigen::Ref<Vec>)> eval;
  std::function<void(double, const Vec&, const Vec&, Mat&, Mat&, int)> jac;
};

}  // namespace

AgentSetup make_agent_setup(const Problem& p, uint32_t id, const AdmmOptions& options) {
  AgentSetup s;
  s.T = p.T;
  s.N = p.N;
  s.model = p.agent(id);
  s.options = options;
  for (const CouplingModel& c : p.couplings) {
    if (c.owner == id) s.couplings_out.push_back(c);
    if (c.neighbor == id) s.couplings_in.push_back(c);
  }
  CouplingGraph g = p.graph();
  for (uint32_t j : g.neighborhood(id)) {
    s.neighbor_models[j] = p.agent(j);
    s.neighbor_degree[j] = static_cast<int>(g.neighborhood(j).size());
  }
  return s;
}

AdmmAgent::AdmmAgent(AgentSetup setup) : setup_(std::move(setup)) {
  build_layout();
  build_instance();
  init_blocks();
}

void AdmmAgent::build_layout() {
  const AdmmOptions& o = setup_.options;
  approx_ = any_approximation(o);
  approx_dyn_ = o.approximate_dynamics;

  std::set<uint32_t> send, recv;
  for (const CouplingModel& c : setup_.couplings_out) send.insert(c.neighbor);
  for (const CouplingModel& c : setup_.couplings_in) recv.insert(c.owner);
  send_ids_ = sorted_unique(send);
  recv_ids_ = sorted_unique(recv);
  std::set<uint32_t> all = send;
  all.insert(recv.begin(), recv.end());
  copy_ids_ = approx_ ? sorted_unique(all) : send_ids_;
  holder_ids_ = approx_ ? sorted_unique(all) : recv_ids_;
  eta_self_ = 1.0 / (1.0 + static_cast<double>(all.size()));

  edges_.clear();
  edge_index_.clear();
  x_dim_ = setup_.model.nx;
  u_dim_ = setup_.model.nu;
  for (uint32_t j : copy_ids_) {
    Edge e;
    e.id = j;
    auto it = setup_.neighbor_models.find(j);
    if (it == setup_.neighbor_models.end()) {
      std::ostringstream os;
      os << "agent " << id() << ": no model for neighbor " << j;
      throw std::runtime_error(os.str());
    }
    e.model = &it->second;
    e.nx = e.model->nx;
    e.nu = e.model->nu;
    e.sending = std::binary_search(send_ids_.begin(), send_ids_.end(), j);
    for (const CouplingModel& c : setup_.couplings_out)
      if (c.neighbor == j) e.out.push_back(&c);
    for (const CouplingModel& c : setup_.couplings_in)
      if (c.owner == j) e.in.push_back(&c);
    if (o.approximate_cost) {
      auto deg = setup_.neighbor_degree.find(j);
      if (deg == setup_.neighbor_degree.end()) {
        std::ostringstream os;
        os << "agent " << id() << ": no neighborhood size for neighbor " << j;
        throw std::runtime_error(os.str());
      }
      e.eta = 1.0 / (1.0 + static_cast<double>(deg->second));
    }
    if (approx_dyn_) {
      e.cu = u_dim_;
      u_dim_ += e.nu;
      e.cv = u_dim_;
      u_dim_ += e.nx;
      e.sx = x_dim_;
      x_dim_ += e.nx;
    } else {
      e.cx = u_dim_;
      u_dim_ += e.nx;
      e.cu = u_dim_;
      u_dim_ += e.nu;
    }
    edge_index_[j] = static_cast<int>(edges_.size());
    edges_.push_back(std::move(e));
  }

  x0_self_ = setup_.model.x0;
  for (const Edge& e : edges_) {
    if (e.model->x0.size() == e.nx) x0_nbr_[e.id] = e.model->x0;
  }
}

void AdmmAgent::build_instance() {
  const AgentModel& m = setup_.model;
  const int nxo = m.nx, nuo = m.nu;
  const double wself = setup_.options.approximate_cost ? eta_self_ : 1.0;
  const bool cost_nbr = setup_.options.approximate_cost;
  const double T = setup_.T;

  inst_ = OcpInstance{};
  inst_.nx = x_dim_;
  inst_.nu = u_dim_;
  inst_.T = T;
  inst_.N = setup_.N;
  inst_.x0 = Vec::Zero(x_dim_);

  inst_.u_min = Vec::Constant(u_dim_, -kInf);
  inst_.u_max = Vec::Constant(u_dim_, kInf);
  inst_.u_min.head(nuo) = lower_bounds(m);
  inst_.u_max.head(nuo) = upper_bounds(m);
  for (const Edge& e : edges_) {
    inst_.u_min.segment(e.cu, e.nu) = lower_bounds(*e.model);
    inst_.u_max.segment(e.cu, e.nu) = upper_bounds(*e.model);
  }

  inst_.f = [this, nxo, nuo](double t, const Vec& X, const Vec& U) {
    Vec dx = Vec::Zero(x_dim_);
    const Vec x = X.head(nxo), u = U.head(nuo);
    dx.head(nxo) = setup_.model.f(x, u, t);
    for (const Edge& e : edges_) {
      const Vec xj = approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
      const Vec uj = U.segment(e.cu, e.nu);
      for (const CouplingModel* c : e.out) dx.head(nxo) += c->f(x, u, xj, uj, t);
      if (approx_dyn_) {
        Vec dxj = e.model->f(xj, uj, t);
        for (const CouplingModel* c : e.in) dxj += c->f(xj, uj, x, u, t);
        dxj += U.segment(e.cv, e.nx);
        dx.segment(e.sx, e.nx) = dxj;
      }
    }
    return dx;
  };

  inst_.dfdx = [this, nxo, nuo](double t, const Vec& X, const Vec& U) {
    Mat J = Mat::Zero(x_dim_, x_dim_);
    const Vec x = X.head(nxo), u = U.head(nuo);
    J.topLeftCorner(nxo, nxo) = setup_.model.dfdx(x, u, t);
    for (const Edge& e : edges_) {
      const Vec xj = approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
      const Vec uj = U.segment(e.cu, e.nu);
      for (const CouplingModel* c : e.out) {
        J.topLeftCorner(nxo, nxo) += c->dfdxi(x, u, xj, uj, t);
        if (approx_dyn_) J.block(0, e.sx, nxo, e.nx) += c->dfdxj(x, u, xj, uj, t);
      }
      if (approx_dyn_) {
        J.block(e.sx, e.sx, e.nx, e.nx) = e.model->dfdx(xj, uj, t);
        for (const CouplingModel* c : e.in) {
          J.block(e.sx, e.sx, e.nx, e.nx) += c->dfdxi(xj, uj, x, u, t);
          J.block(e.sx, 0, e.nx, nxo) += c->dfdxj(xj, uj, x, u, t);
        }
      }
    }
    return J;
  };

  inst_.dfdu = [this, nxo, nuo](double t, const Vec& X, const Vec& U) {
    Mat J = Mat::Zero(x_dim_, u_dim_);
    const Vec x = X.head(nxo), u = U.head(nuo);
    J.topLeftCorner(nxo, nuo) = setup_.model.dfdu(x, u, t);
    for (const Edge& e : edges_) {
      const Vec xj = approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
      const Vec uj = U.segment(e.cu, e.nu);
      for (const CouplingModel* c : e.out) {
        J.topLeftCorner(nxo, nuo) += c->dfdui(x, u, xj, uj, t);
        J.block(0, e.cu, nxo, e.nu) += c->dfduj(x, u, xj, uj, t);
        if (!approx_dyn_) J.block(0, e.cx, nxo, e.nx) += c->dfdxj(x, u, xj, uj, t);
      }
      if (approx_dyn_) {
        J.block(e.sx, e.cu, e.nx, e.nu) = e.model->dfdu(xj, uj, t);
        for (const CouplingModel* c : e.in) {
          J.block(e.sx, e.cu, e.nx, e.nu) += c->dfdui(xj, uj, x, u, t);
          J.block(e.sx, 0, e.nx, nuo) += c->dfduj(xj, uj, x, u, t);
        }
        J.block(e.sx, e.cv, e.nx, e.nx).setIdentity();
      }
    }
    return J;
  };

  // Penalty weight of one consensus element at time t: mu^T e + rho/2 |e|^2
  // with e = z - w. The lambdas below add values and exact derivatives.
  auto prox_val = [](double t, const Trajectory& z, const Trajectory& mu,
                     const Trajectory& rho, const Vec& w) {
    double s = 0.0;
    if (z.dim() == 0) return s;
    const Vec zt = z.lerp(t), mt = mu.lerp(t), rt = rho.lerp(t);
    for (int c = 0; c < w.size(); ++c) {
      const double e = zt(c) - w(c);
      s += mt(c) * e + 0.5 * rt(c) * e * e;
    }
    return s;
  };
  // d/dw of the term above: -(mu + rho.*e)
  auto prox_grad = [](double t, const Trajectory& z, const Trajectory& mu,
                      const Trajectory& rho, const Vec& w, Eigen::Ref<Vec> out) {
    if (z.dim() == 0) return;
    const Vec zt = z.lerp(t), mt = mu.lerp(t), rt = rho.lerp(t);
    for (int c = 0; c < w.size(); ++c) out(c) -= mt(c) + rt(c) * (zt(c) - w(c));
  };

  // Per-edge coupling sums entering the external influences; shared by the
  // value and gradient paths below.
  struct InflEval {
    std::vector<Vec> f;         // sum of coupling terms per sending edge
    std::vector<Mat> Ax, Au;    // d/d own state, own control
    std::vector<Mat> Bx, Bu;    // d/d copy state, copy control
    Vec F;                      // total over sending edges
    Mat SAx, SAu;
  };
  auto infl_values = [this, nxo](double t, const Vec& X, const Vec& U, bool with_jac) {
    InflEval ev;
    const Vec x = X.head(nxo), u = U.head(setup_.model.nu);
    ev.F = Vec::Zero(nxo);
    if (with_jac) {
      ev.SAx = Mat::Zero(nxo, nxo);
      ev.SAu = Mat::Zero(nxo, setup_.model.nu);
    }
    ev.f.resize(edges_.size());
    if (with_jac) {
      ev.Ax.resize(edges_.size());
      ev.Au.resize(edges_.size());
      ev.Bx.resize(edges_.size());
      ev.Bu.resize(edges_.size());
    }
    for (size_t i = 0; i < edges_.size(); ++i) {
      const Edge& e = edges_[i];
      if (!e.sending) continue;
      const Vec xj = X.segment(e.sx, e.nx);
      const Vec uj = U.segment(e.cu, e.nu);
      Vec fe = Vec::Zero(nxo);
      Mat ax, au, bx, bu;
      if (with_jac) {
        ax = Mat::Zero(nxo, nxo);
        au = Mat::Zero(nxo, setup_.model.nu);
        bx = Mat::Zero(nxo, e.nx);
        bu = Mat::Zero(nxo, e.nu);
      }
      for (const CouplingModel* c : e.out) {
        fe += c->f(x, u, xj, uj, t);
        if (with_jac) {
          ax += c->dfdxi(x, u, xj, uj, t);
          au += c->dfdui(x, u, xj, uj, t);
          bx += c->dfdxj(x, u, xj, uj, t);
          bu += c->dfduj(x, u, xj, uj, t);
        }
      }
      ev.F += fe;
      ev.f[i] = std::move(fe);
      if (with_jac) {
        ev.SAx += ax;
        ev.SAu += au;
        ev.Ax[i] = std::move(ax);
        ev.Au[i] = std::move(au);
        ev.Bx[i] = std::move(bx);
        ev.Bu[i] = std::move(bu);
      }
    }
    return ev;
  };

  inst_.l = [this, nxo, nuo, wself, cost_nbr, prox_val, infl_values](double t, const Vec& X,
                                                                     const Vec& U) {
    const Vec x = X.head(nxo), u = U.head(nuo);
    double val = setup_.model.l ? wself * setup_.model.l(x, u, t) : 0.0;
    if (!approx_dyn_) val += prox_val(t, own_.zx, own_.mu_x, own_.rho_x, x);
    val += prox_val(t, own_.zu, own_.mu_u, own_.rho_u, u);
    for (const Edge& e : edges_) {
      const Vec xj = approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
      const Vec uj = U.segment(e.cu, e.nu);
      if (cost_nbr && e.model->l) val += e.eta * e.model->l(xj, uj, t);
      const CopyHeld& hb = held_.at(e.id);
      if (!approx_dyn_) val += prox_val(t, hb.zx, hb.mu_x, hb.rho_x, xj);
      val += prox_val(t, hb.zu, hb.mu_u, hb.rho_u, uj);
      if (approx_dyn_) val += prox_val(t, hb.zv, hb.mu_v, hb.rho_v, U.segment(e.cv, e.nx));
    }
    if (approx_dyn_) {
      auto ev = infl_values(t, X, U, false);
      for (size_t i = 0; i < edges_.size(); ++i) {
        const Edge& e = edges_[i];
        Vec vij = ev.F;
        if (e.sending) vij -= ev.f[i];
        const InfluenceOwn& ib = infl_.at(e.id);
        val += prox_val(t, ib.z, ib.mu, ib.rho, vij);
      }
    }
    return val;
  };

  inst_.dldx = [this, nxo, nuo, wself, cost_nbr, prox_grad, infl_values](double t, const Vec& X,
                                                                         const Vec& U) {
    Vec G = Vec::Zero(x_dim_);
    const Vec x = X.head(nxo), u = U.head(nuo);
    if (setup_.model.dldx) G.head(nxo) = wself * setup_.model.dldx(x, u, t);
    if (!approx_dyn_) {
      prox_grad(t, own_.zx, own_.mu_x, own_.rho_x, x, G.head(nxo));
      return G;
    }
    for (const Edge& e : edges_) {
      const Vec xj = X.segment(e.sx, e.nx);
      const Vec uj = U.segment(e.cu, e.nu);
      if (cost_nbr && e.model->dldx)
        G.segment(e.sx, e.nx) += e.eta * e.model->dldx(xj, uj, t);
    }
    auto ev = infl_values(t, X, U, true);
    for (size_t i = 0; i < edges_.size(); ++i) {
      const Edge& e = edges_[i];
      Vec vij = ev.F;
      if (e.sending) vij -= ev.f[i];
      const InfluenceOwn& ib = infl_.at(e.id);
      const Vec zt = ib.z.lerp(t), mt = ib.mu.lerp(t), rt = ib.rho.lerp(t);
      Vec w = mt;
      for (int c = 0; c < nxo; ++c) w(c) += rt(c) * (zt(c) - vij(c));
      Mat A = ev.SAx;
      if (e.sending) A -= ev.Ax[i];
      G.head(nxo) -= A.transpose() * w;
      for (size_t s = 0; s < edges_.size(); ++s) {
        if (s == i || !edges_[s].sending) continue;
        G.segment(edges_[s].sx, edges_[s].nx) -= ev.Bx[s].transpose() * w;
      }
    }
    return G;
  };

  inst_.dldu = [this, nxo, nuo, wself, cost_nbr, prox_grad, infl_values](double t, const Vec& X,
                                                                         const Vec& U) {
    Vec G = Vec::Zero(u_dim_);
    const Vec x = X.head(nxo), u = U.head(nuo);
    if (setup_.model.dldu) G.head(nuo) = wself * setup_.model.dldu(x, u, t);
    prox_grad(t, own_.zu, own_.mu_u, own_.rho_u, u, G.head(nuo));
    for (const Edge& e : edges_) {
      const Vec xj = approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
      const Vec uj = U.segment(e.cu, e.nu);
      if (cost_nbr) {
        if (e.model->dldu) G.segment(e.cu, e.nu) += e.eta * e.model->dldu(xj, uj, t);
        if (!approx_dyn_ && e.model->dldx)
          G.segment(e.cx, e.nx) += e.eta * e.model->dldx(xj, uj, t);
      }
      const CopyHeld& hb = held_.at(e.id);
      if (!approx_dyn_) prox_grad(t, hb.zx, hb.mu_x, hb.rho_x, xj, G.segment(e.cx, e.nx));
      prox_grad(t, hb.zu, hb.mu_u, hb.rho_u, uj, G.segment(e.cu, e.nu));
      if (approx_dyn_)
        prox_grad(t, hb.zv, hb.mu_v, hb.rho_v, U.segment(e.cv, e.nx), G.segment(e.cv, e.nx));
    }
    if (approx_dyn_) {
      auto ev = infl_values(t, X, U, true);
      for (size_t i = 0; i < edges_.size(); ++i) {
        const Edge& e = edges_[i];
        Vec vij = ev.F;
        if (e.sending) vij -= ev.f[i];
        const InfluenceOwn& ib = infl_.at(e.id);
        const Vec zt = ib.z.lerp(t), mt = ib.mu.lerp(t), rt = ib.rho.lerp(t);
        Vec w = mt;
        for (int c = 0; c < nxo; ++c) w(c) += rt(c) * (zt(c) - vij(c));
        Mat A = ev.SAu;
        if (e.sending) A -= ev.Au[i];
        G.head(nuo) -= A.transpose() * w;
        for (size_t s = 0; s < edges_.size(); ++s) {
          if (s == i || !edges_[s].sending) continue;
          G.segment(edges_[s].cu, edges_[s].nu) -= ev.Bu[s].transpose() * w;
        }
      }
    }
    return G;
  };

  inst_.V = [this, nxo, wself, cost_nbr, T](const Vec& XT, const Vec& UT) {
    double v = setup_.model.V ? wself * setup_.model.V(XT.head(nxo), T) : 0.0;
    if (cost_nbr) {
      for (const Edge& e : edges_) {
        if (!e.model->V) continue;
        const Vec xjT = approx_dyn_ ? Vec(XT.segment(e.sx, e.nx)) : Vec(UT.segment(e.cx, e.nx));
        v += e.eta * e.model->V(xjT, T);
      }
    }
    return v;
  };
  inst_.dVdx = [this, nxo, wself, cost_nbr, T](const Vec& XT, const Vec&) {
    Vec G = Vec::Zero(x_dim_);
    if (setup_.model.dVdx) G.head(nxo) = wself * setup_.model.dVdx(XT.head(nxo), T);
    if (cost_nbr && approx_dyn_) {
      for (const Edge& e : edges_) {
        if (!e.model->dVdx) continue;
        G.segment(e.sx, e.nx) = e.eta * e.model->dVdx(XT.segment(e.sx, e.nx), T);
      }
    }
    return G;
  };
  inst_.dVdu = [this, nxo, cost_nbr, T](const Vec&, const Vec& UT) {
    Vec G = Vec::Zero(u_dim_);
    if (cost_nbr && !approx_dyn_) {
      for (const Edge& e : edges_) {
        if (!e.model->dVdx) continue;
        G.segment(e.cx, e.nx) = e.eta * e.model->dVdx(UT.segment(e.cx, e.nx), T);
      }
    }
    return G;
  };

  // Constraint groups: own, own couplings, and under constraint approximation
  // the neighbors' own and coupling constraints evaluated on the copies.
  auto gblocks = std::make_shared<std::vector<ConsBlock>>();
  auto hblocks = std::make_shared<std::vector<ConsBlock>>();
  auto copy_state = [this](const Vec& X, const Vec& U, const Edge& e) {
    return approx_dyn_ ? Vec(X.segment(e.sx, e.nx)) : Vec(U.segment(e.cx, e.nx));
  };

  auto add_own = [&](std::vector<ConsBlock>& bs, int rows, bool eq) {
    if (rows == 0) return;
    ConsBlock b;
    b.rows = rows;
    const AgentModel* am = &setup_.model;
    b.eval = [am, nxo, nuo, eq](double t, const Vec& X, const Vec& U, Eigen::Ref<Vec> out) {
      out = eq ? am->g(X.head(nxo), U.head(nuo), t) : am->h(X.head(nxo), U.head(nuo), t);
    };
    b.jac = [am, nxo, nuo, eq, rows](double t, const Vec& X, const Vec& U, Mat& Jx, Mat& Ju,
                                     int off) {
      const Vec x = X.head(nxo), u = U.head(nuo);
      Jx.block(off, 0, rows, nxo) = eq ? am->dgdx(x, u, t) : am->dhdx(x, u, t);
      Ju.block(off, 0, rows, nuo) = eq ? am->dgdu(x, u, t) : am->dhdu(x, u, t);
    };
    bs.push_back(std::move(b));
  };
  add_own(*gblocks, m.ng, true);
  add_own(*hblocks, m.nh, false);

  for (const Edge& e : edges_) {
    // our coupling constraints: arguments (own, copy of j)
    for (const CouplingModel* c : e.out) {
      auto add_out = [&](std::vector<ConsBlock>& bs, int rows, bool eq) {
        if (rows == 0) return;
        ConsBlock b;
        b.rows = rows;
        const Edge* ep = &e;
        b.eval = [this, c, ep, nxo, nuo, eq, copy_state](double t, const Vec& X, const Vec& U,
                                                         Eigen::Ref<Vec> out) {
          const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
          out = eq ? c->g(X.head(nxo), U.head(nuo), xj, uj, t)
                   : c->h(X.head(nxo), U.head(nuo), xj, uj, t);
        };
        b.jac = [this, c, ep, nxo, nuo, eq, rows, copy_state](double t, const Vec& X, const Vec& U,
                                                              Mat& Jx, Mat& Ju, int off) {
          const Vec x = X.head(nxo), u = U.head(nuo);
          const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
          Jx.block(off, 0, rows, nxo) = eq ? c->dgdxi(x, u, xj, uj, t) : c->dhdxi(x, u, xj, uj, t);
          Ju.block(off, 0, rows, nuo) = eq ? c->dgdui(x, u, xj, uj, t) : c->dhdui(x, u, xj, uj, t);
          Mat dxj = eq ? c->dgdxj(x, u, xj, uj, t) : c->dhdxj(x, u, xj, uj, t);
          if (approx_dyn_)
            Jx.block(off, ep->sx, rows, ep->nx) = dxj;
          else
            Ju.block(off, ep->cx, rows, ep->nx) = dxj;
          Ju.block(off, ep->cu, rows, ep->nu) =
              eq ? c->dgduj(x, u, xj, uj, t) : c->dhduj(x, u, xj, uj, t);
        };
        bs.push_back(std::move(b));
      };
      add_out(*gblocks, c->ng, true);
      add_out(*hblocks, c->nh, false);
    }
    if (!setup_.options.approximate_constraints) continue;
    // the neighbor's own constraints on its copies
    auto add_nbr = [&](std::vector<ConsBlock>& bs, int rows, bool eq) {
      if (rows == 0) return;
      ConsBlock b;
      b.rows = rows;
      const Edge* ep = &e;
      b.eval = [this, ep, eq, copy_state](double t, const Vec& X, const Vec& U,
                                          Eigen::Ref<Vec> out) {
        const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
        out = eq ? ep->model->g(xj, uj, t) : ep->model->h(xj, uj, t);
      };
      b.jac = [this, ep, eq, rows, copy_state](double t, const Vec& X, const Vec& U, Mat& Jx,
                                               Mat& Ju, int off) {
        const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
        Mat dx = eq ? ep->model->dgdx(xj, uj, t) : ep->model->dhdx(xj, uj, t);
        if (approx_dyn_)
          Jx.block(off, ep->sx, rows, ep->nx) = dx;
        else
          Ju.block(off, ep->cx, rows, ep->nx) = dx;
        Ju.block(off, ep->cu, rows, ep->nu) =
            eq ? ep->model->dgdu(xj, uj, t) : ep->model->dhdu(xj, uj, t);
      };
      bs.push_back(std::move(b));
    };
    add_nbr(*gblocks, e.model->ng, true);
    add_nbr(*hblocks, e.model->nh, false);
    // the neighbor's coupling constraints with us: arguments (copy of j, own)
    for (const CouplingModel* c : e.in) {
      auto add_in = [&](std::vector<ConsBlock>& bs, int rows, bool eq) {
        if (rows == 0) return;
        ConsBlock b;
        b.rows = rows;
        const Edge* ep = &e;
        b.eval = [this, c, ep, nxo, nuo, eq, copy_state](double t, const Vec& X, const Vec& U,
                                                         Eigen::Ref<Vec> out) {
          const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
          out = eq ? c->g(xj, uj, X.head(nxo), U.head(nuo), t)
                   : c->h(xj, uj, X.head(nxo), U.head(nuo), t);
        };
        b.jac = [this, c, ep, nxo, nuo, eq, rows, copy_state](double t, const Vec& X, const Vec& U,
                                                              Mat& Jx, Mat& Ju, int off) {
          const Vec x = X.head(nxo), u = U.head(nuo);
          const Vec xj = copy_state(X, U, *ep), uj = U.segment(ep->cu, ep->nu);
          Mat dxj = eq ? c->dgdxi(xj, uj, x, u, t) : c->dhdxi(xj, uj, x, u, t);
          if (approx_dyn_)
            Jx.block(off, ep->sx, rows, ep->nx) = dxj;
          else
            Ju.block(off, ep->cx, rows, ep->nx) = dxj;
          Ju.block(off, ep->cu, rows, ep->nu) =
              eq ? c->dgdui(xj, uj, x, u, t) : c->dhdui(xj, uj, x, u, t);
          Jx.block(off, 0, rows, nxo) = eq ? c->dgdxj(xj, uj, x, u, t) : c->dhdxj(xj, uj, x, u, t);
          Ju.block(off, 0, rows, nuo) = eq ? c->dgduj(xj, uj, x, u, t) : c->dhduj(xj, uj, x, u, t);
        };
        bs.push_back(std::move(b));
      };
      add_in(*gblocks, c->ng, true);
      add_in(*hblocks, c->nh, false);
    }
  }

  auto wire = [this](std::shared_ptr<std::vector<ConsBlock>> bs, int total,
                     std::function<Vec(double, const Vec&, const Vec&)>& val,
                     std::function<Mat(double, const Vec&, const Vec&)>& dx,
                     std::function<Mat(double, const Vec&, const Vec&)>& du) {
    if (total == 0) return;
    val = [bs, total](double t, const Vec& X, const Vec& U) {
      Vec out(total);
      int off = 0;
      for (const ConsBlock& b : *bs) {
        b.eval(t, X, U, out.segment(off, b.rows));
        off += b.rows;
      }
      return out;
    };
    dx = [this, bs, total](double t, const Vec& X, const Vec& U) {
      Mat Jx = Mat::Zero(total, x_dim_), Ju = Mat::Zero(total, u_dim_);
      int off = 0;
      for (const ConsBlock& b : *bs) {
        b.jac(t, X, U, Jx, Ju, off);
        off += b.rows;
      }
      return Jx;
    };
    du = [this, bs, total](double t, const Vec& X, const Vec& U) {
      Mat Jx = Mat::Zero(total, x_dim_), Ju = Mat::Zero(total, u_dim_);
      int off = 0;
      for (const ConsBlock& b : *bs) {
        b.jac(t, X, U, Jx, Ju, off);
        off += b.rows;
      }
      return Ju;
    };
  };
  int ng = 0, nh = 0;
  for (const ConsBlock& b : *gblocks) ng += b.rows;
  for (const ConsBlock& b : *hblocks) nh += b.rows;
  inst_.ng = ng;
  inst_.nh = nh;
  wire(gblocks, ng, inst_.g, inst_.dgdx, inst_.dgdu);
  wire(hblocks, nh, inst_.h, inst_.dhdx, inst_.dhdu);

  refresh_x0();
  solver_ = std::make_unique<GradSolver>(inst_, setup_.options.solver);
  al_ = solver_->make_al_state();
}

void AdmmAgent::init_blocks() {
  const double T = setup_.T;
  const int N = setup_.N;
  const double rho0 = setup_.options.rho0;
  const AgentModel& m = setup_.model;
  const Vec u_rest = rest_control(m);

  auto full = [&](int dim, const Vec& v) {
    Trajectory tr(T, N, dim);
    if (dim > 0) tr.set_constant(v);
    return tr;
  };
  auto zeros = [&](int dim) { return Trajectory(T, N, dim); };
  auto pconst = [&](int dim) { return full(dim, Vec::Constant(dim, rho0)); };

  x_ = full(m.nx, x0_self_);
  u_ = full(m.nu, u_rest);

  own_ = OwnSide{};
  const int zx_dim = approx_dyn_ ? 0 : m.nx;
  own_.zx = full(zx_dim, x0_self_.head(zx_dim));
  own_.zu = full(m.nu, u_rest);
  own_.zx_prev = own_.zx;
  own_.zu_prev = own_.zu;
  own_.mu_x = zeros(zx_dim);
  own_.mu_u = zeros(m.nu);
  own_.mu_x_prev = own_.mu_x;
  own_.mu_u_prev = own_.mu_u;
  own_.rho_x = pconst(zx_dim);
  own_.rho_u = pconst(m.nu);

  held_.clear();
  infl_.clear();
  for (const Edge& e : edges_) {
    auto it = x0_nbr_.find(e.id);
    const Vec xj0 = it != x0_nbr_.end() ? it->second : Vec::Zero(e.nx);
    const Vec uj0 = rest_control(*e.model);
    CopyHeld hb;
    hb.cx = full(e.nx, xj0);
    hb.cu = full(e.nu, uj0);
    hb.zx = full(zx_dim > 0 ? e.nx : 0, xj0.head(zx_dim > 0 ? e.nx : 0));
    hb.zu = full(e.nu, uj0);
    hb.zx_prev = hb.zx;
    hb.zu_prev = hb.zu;
    hb.mu_x = zeros(hb.zx.dim());
    hb.mu_u = zeros(e.nu);
    hb.mu_x_prev = hb.mu_x;
    hb.mu_u_prev = hb.mu_u;
    hb.rho_x = pconst(hb.zx.dim());
    hb.rho_u = pconst(e.nu);
    if (approx_dyn_) {
      hb.cv = zeros(e.nx);
      hb.zv = zeros(e.nx);
      hb.zv_prev = hb.zv;
      hb.mu_v = zeros(e.nx);
      hb.mu_v_prev = hb.mu_v;
      hb.rho_v = pconst(e.nx);
    }
    held_[e.id] = std::move(hb);
    if (approx_dyn_) {
      InfluenceOwn ib;
      ib.vfun = zeros(m.nx);
      ib.z = zeros(m.nx);
      ib.z_prev = ib.z;
      ib.mu = zeros(m.nx);
      ib.mu_prev = ib.mu;
      ib.rho = pconst(m.nx);
      ib.vbar = zeros(m.nx);
      ib.mu_recv = zeros(m.nx);
      ib.rho_mirror = pconst(m.nx);
      infl_[e.id] = std::move(ib);
    }
  }

  mirror_.clear();
  for (uint32_t j : holder_ids_) {
    CopyMirror mr;
    mr.cx = full(zx_dim, x0_self_.head(zx_dim));
    mr.cu = full(m.nu, u_rest);
    mr.mu_x = zeros(zx_dim);
    mr.mu_u = zeros(m.nu);
    mr.rho_x = pconst(zx_dim);
    mr.rho_u = pconst(m.nu);
    mirror_[j] = std::move(mr);
  }

  q_ = 0;
  conv_norm_ = 0.0;
  stats_.clear();
}

void AdmmAgent::set_states(const Vec& own, const std::map<uint32_t, Vec>& neighbors) {
  if (own.size() != setup_.model.nx)
    throw std::invalid_argument("set_states: own state dimension mismatch");
  x0_self_ = own;
  for (const auto& [j, v] : neighbors) x0_nbr_[j] = v;
}

void AdmmAgent::shift(double dt) {
  auto sh = [dt](Trajectory& t) {
    if (t.size() > 0) t = t.shifted(dt);
  };
  sh(x_);
  sh(u_);
  sh(own_.zx);
  sh(own_.zu);
  sh(own_.zx_prev);
  sh(own_.zu_prev);
  sh(own_.mu_x);
  sh(own_.mu_u);
  sh(own_.mu_x_prev);
  sh(own_.mu_u_prev);
  for (auto& [j, hb] : held_) {
    sh(hb.cx);
    sh(hb.cu);
    sh(hb.cv);
    sh(hb.zx);
    sh(hb.zu);
    sh(hb.zv);
    sh(hb.zx_prev);
    sh(hb.zu_prev);
    sh(hb.zv_prev);
    sh(hb.mu_x);
    sh(hb.mu_u);
    sh(hb.mu_v);
    sh(hb.mu_x_prev);
    sh(hb.mu_u_prev);
    sh(hb.mu_v_prev);
    hb.q_z = 0;
  }
  for (auto& [j, mr] : mirror_) {
    sh(mr.cx);
    sh(mr.cu);
    sh(mr.mu_x);
    sh(mr.mu_u);
    mr.q_copies = 0;
    mr.q_mu = 0;
  }
  for (auto& [j, ib] : infl_) {
    sh(ib.vfun);
    sh(ib.z);
    sh(ib.z_prev);
    sh(ib.mu);
    sh(ib.mu_prev);
    sh(ib.vbar);
    sh(ib.mu_recv);
    ib.q_vbar = 0;
    ib.q_mu = 0;
  }
  if (al_.initialized) {
    sh(al_.nu_g);
    sh(al_.c_g);
    sh(al_.nu_h);
    sh(al_.c_h);
  }
  q_ = 0;
  conv_norm_ = 0.0;
  stats_.clear();
}

void AdmmAgent::reset() {
  init_blocks();
  al_ = solver_->make_al_state();
}

bool AdmmAgent::ready_for_step3() const {
  for (uint32_t j : holder_ids_) {
    const CopyMirror& mr = mirror_.at(j);
    if (mr.q_copies != q_ || mr.q_mu != q_ - 1) return false;
  }
  if (approx_dyn_) {
    for (const auto& [j, ib] : infl_)
      if (ib.q_vbar != q_ || ib.q_mu != q_ - 1) return false;
  }
  return true;
}

bool AdmmAgent::ready_for_step5() const {
  for (const auto& [j, hb] : held_)
    if (hb.q_z != q_) return false;
  return true;
}

void AdmmAgent::abort_round() {
  for (auto& [j, hb] : held_) hb.q_z = 0;
  for (auto& [j, mr] : mirror_) {
    mr.q_copies = 0;
    mr.q_mu = 0;
  }
  for (auto& [j, ib] : infl_) {
    ib.q_vbar = 0;
    ib.q_mu = 0;
  }
  q_ = 0;
  conv_norm_ = 0.0;
  stats_.clear();
}

void AdmmAgent::reconfigure(AgentSetup setup) {
  OwnSide old_own = std::move(own_);
  auto old_held = std::move(held_);
  auto old_mirror = std::move(mirror_);
  auto old_infl = std::move(infl_);
  Trajectory old_x = x_, old_u = u_;
  Vec old_x0 = x0_self_;
  auto old_x0_nbr = x0_nbr_;

  setup_ = std::move(setup);
  x0_nbr_.clear();
  build_layout();
  for (const auto& [j, v] : old_x0_nbr)
    if (x0_nbr_.count(j)) x0_nbr_[j] = v;
  x0_self_ = old_x0.size() == setup_.model.nx ? old_x0 : setup_.model.x0;
  build_instance();
  init_blocks();

  if (old_own.zu.dim() == own_.zu.dim() && old_own.zx.dim() == own_.zx.dim()) own_ = std::move(old_own);
  if (old_x.dim() == x_.dim() && old_x.size() == x_.size()) x_ = old_x;
  if (old_u.dim() == u_.dim() && old_u.size() == u_.size()) u_ = old_u;
  for (auto& [j, hb] : held_) {
    auto it = old_held.find(j);
    if (it != old_held.end() && it->second.cx.dim() == hb.cx.dim() &&
        it->second.zx.dim() == hb.zx.dim())
      hb = std::move(it->second);
  }
  for (auto& [j, mr] : mirror_) {
    auto it = old_mirror.find(j);
    if (it != old_mirror.end() && it->second.cx.dim() == mr.cx.dim()) mr = std::move(it->second);
  }
  for (auto& [j, ib] : infl_) {
    auto it = old_infl.find(j);
    if (it != old_infl.end()) ib = std::move(it->second);
  }
}

void AdmmAgent::pack_initial(Trajectory& u_init) const {
  const int N = setup_.N;
  u_init = Trajectory(setup_.T, N, u_dim_);
  u_init.values().leftCols(setup_.model.nu) = u_.values();
  for (const Edge& e : edges_) {
    const CopyHeld& hb = held_.at(e.id);
    u_init.values().middleCols(e.cu, e.nu) = hb.cu.values();
    if (approx_dyn_)
      u_init.values().middleCols(e.cv, e.nx) = hb.cv.values();
    else
      u_init.values().middleCols(e.cx, e.nx) = hb.cx.values();
  }
}

void AdmmAgent::unpack_solution(const SolveResult& r) {
  x_ = r.x.columns(0, setup_.model.nx);
  u_ = r.u.columns(0, setup_.model.nu);
  for (const Edge& e : edges_) {
    CopyHeld& hb = held_[e.id];
    hb.cu = r.u.columns(e.cu, e.nu);
    if (approx_dyn_) {
      hb.cv = r.u.columns(e.cv, e.nx);
      hb.cx = r.x.columns(e.sx, e.nx);
    } else {
      hb.cx = r.u.columns(e.cx, e.nx);
    }
  }
}

Trajectory AdmmAgent::influence_at(uint32_t skip) const {
  const int N = setup_.N;
  Trajectory v(setup_.T, N, setup_.model.nx);
  for (int k = 0; k < N; ++k) {
    const double t = v.time(k);
    const Vec x = x_.at(k), u = u_.at(k);
    Vec acc = Vec::Zero(setup_.model.nx);
    for (const Edge& e : edges_) {
      if (!e.sending || e.id == skip) continue;
      const CopyHeld& hb = held_.at(e.id);
      const Vec xj = hb.cx.at(k), uj = hb.cu.at(k);
      for (const CouplingModel* c : e.out) acc += c->f(x, u, xj, uj, t);
    }
    v.set(k, acc);
  }
  return v;
}

void AdmmAgent::refresh_influences() {
  if (!approx_dyn_) return;
  for (const Edge& e : edges_) infl_[e.id].vfun = influence_at(e.id);
}

void AdmmAgent::refresh_x0() {
  inst_.x0 = Vec::Zero(x_dim_);
  inst_.x0.head(setup_.model.nx) = x0_self_;
  if (!approx_dyn_) return;
  for (const Edge& e : edges_) {
    auto it = x0_nbr_.find(e.id);
    if (it == x0_nbr_.end()) {
      std::ostringstream os;
      os << "agent " << id() << ": no initial state for neighbor " << e.id;
      throw std::runtime_error(os.str());
    }
    inst_.x0.segment(e.sx, e.nx) = it->second;
  }
}

void AdmmAgent::step1_solve() {
  ++q_;
  refresh_x0();
  solver_ = std::make_unique<GradSolver>(inst_, setup_.options.solver);
  Trajectory u0;
  pack_initial(u0);
  SolveResult r = solver_->solve(u0, al_);
  unpack_solution(r);
  refresh_influences();
  last_solver_iterations_ = r.gradient_iterations;
}

std::vector<Message> AdmmAgent::copies_out() const {
  std::vector<Message> out;
  for (const Edge& e : edges_) {
    const CopyHeld& hb = held_.at(e.id);
    Message m;
    m.kind = MsgKind::local_copies;
    m.from = id();
    m.to = e.id;
    m.q = static_cast<uint32_t>(q_);
    m.x = hb.cx;
    m.u = hb.cu;
    if (approx_dyn_) {
      m.has_v = true;
      m.v = hb.cv;
    }
    out.push_back(std::move(m));
  }
  return out;
}

void AdmmAgent::ingest(const Message& m) {
  switch (m.kind) {
    case MsgKind::local_copies: {
      auto it = mirror_.find(m.from);
      if (it == mirror_.end()) break;  // stale sender, e.g. right after unplugging
      it->second.cx = m.x;
      it->second.cu = m.u;
      it->second.q_copies = static_cast<int>(m.q);
      if (m.has_v) {
        auto iv = infl_.find(m.from);
        if (iv != infl_.end()) {
          iv->second.vbar = m.v;
          iv->second.q_vbar = static_cast<int>(m.q);
        }
      }
      return;
    }
    case MsgKind::coupling_vars: {
      auto it = held_.find(m.from);
      if (it == held_.end()) break;
      CopyHeld& hb = it->second;
      hb.zx_prev = hb.zx;
      hb.zu_prev = hb.zu;
      hb.zx = m.x;
      hb.zu = m.u;
      if (m.has_v) {
        hb.zv_prev = hb.zv;
        hb.zv = m.v;
      }
      hb.q_z = static_cast<int>(m.q);
      return;
    }
    case MsgKind::multiplier_vals: {
      auto it = mirror_.find(m.from);
      if (it == mirror_.end()) break;
      it->second.mu_x = m.x;
      it->second.mu_u = m.u;
      it->second.q_mu = static_cast<int>(m.q);
      if (m.has_v) {
        auto iv = infl_.find(m.from);
        if (iv != infl_.end()) {
          iv->second.mu_recv = m.v;
          iv->second.q_mu = static_cast<int>(m.q);
        }
      }
      return;
    }
    default: {
      std::ostringstream os;
      os << "agent " << id() << ": cannot ingest message kind "
         << static_cast<int>(m.kind);
      throw std::runtime_error(os.str());
    }
  }
}

void AdmmAgent::step3_update() {
  for (uint32_t j : holder_ids_) {
    const CopyMirror& mr = mirror_.at(j);
    if (mr.q_copies != q_ || mr.q_mu != q_ - 1) {
      std::ostringstream os;
      os << "agent " << id() << ": consensus inputs from " << j << " out of step";
      throw std::runtime_error(os.str());
    }
  }
  const double den = 1.0 + static_cast<double>(holder_ids_.size());

  auto zstep = [&](Trajectory& z, Trajectory& z_prev, const Trajectory& val,
                   const Trajectory& mu, const Trajectory& rho, bool xpart) {
    z_prev = z;
    for (int k = 0; k < z.size(); ++k) {
      for (int c = 0; c < z.dim(); ++c) {
        double acc = val(k, c) - mu(k, c) / rho(k, c);
        for (uint32_t j : holder_ids_) {
          const CopyMirror& mr = mirror_.at(j);
          acc += xpart ? mr.cx(k, c) - mr.mu_x(k, c) / mr.rho_x(k, c)
                       : mr.cu(k, c) - mr.mu_u(k, c) / mr.rho_u(k, c);
        }
        z(k, c) = acc / den;
      }
    }
  };
  if (!approx_dyn_) zstep(own_.zx, own_.zx_prev, x_, own_.mu_x, own_.rho_x, true);
  zstep(own_.zu, own_.zu_prev, u_, own_.mu_u, own_.rho_u, false);

  if (approx_dyn_) {
    for (auto& [j, ib] : infl_) {
      if (ib.q_vbar != q_ || ib.q_mu != q_ - 1) {
        std::ostringstream os;
        os << "agent " << id() << ": influence copy from " << j << " out of step";
        throw std::runtime_error(os.str());
      }
      ib.z_prev = ib.z;
      for (int k = 0; k < ib.z.size(); ++k) {
        for (int c = 0; c < ib.z.dim(); ++c) {
          ib.z(k, c) = 0.5 * (ib.vfun(k, c) - ib.mu(k, c) / ib.rho(k, c) + ib.vbar(k, c) -
                              ib.mu_recv(k, c) / ib.rho_mirror(k, c));
        }
      }
    }
  }
}

std::vector<Message> AdmmAgent::coupling_out() const {
  std::vector<Message> out;
  for (uint32_t j : holder_ids_) {
    Message m;
    m.kind = MsgKind::coupling_vars;
    m.from = id();
    m.to = j;
    m.q = static_cast<uint32_t>(q_);
    m.x = own_.zx.dim() > 0 ? own_.zx : Trajectory(setup_.T, setup_.N, 0);
    m.u = own_.zu;
    if (approx_dyn_) {
      m.has_v = true;
      m.v = infl_.at(j).z;
    }
    out.push_back(std::move(m));
  }
  return out;
}

void AdmmAgent::step5_update() {
  auto bump = [](Trajectory& mu, Trajectory& mu_prev, const Trajectory& rho, const Trajectory& z,
                 const Trajectory& actual) {
    mu_prev = mu;
    for (int k = 0; k < mu.size(); ++k)
      for (int c = 0; c < mu.dim(); ++c) mu(k, c) += rho(k, c) * (z(k, c) - actual(k, c));
  };
  if (!approx_dyn_) bump(own_.mu_x, own_.mu_x_prev, own_.rho_x, own_.zx, x_);
  bump(own_.mu_u, own_.mu_u_prev, own_.rho_u, own_.zu, u_);
  for (auto& [j, hb] : held_) {
    if (hb.q_z != q_) {
      std::ostringstream os;
      os << "agent " << id() << ": consensus values from " << j << " out of step";
      throw std::runtime_error(os.str());
    }
    if (!approx_dyn_) bump(hb.mu_x, hb.mu_x_prev, hb.rho_x, hb.zx, hb.cx);
    bump(hb.mu_u, hb.mu_u_prev, hb.rho_u, hb.zu, hb.cu);
    if (approx_dyn_) bump(hb.mu_v, hb.mu_v_prev, hb.rho_v, hb.zv, hb.cv);
  }
  for (auto& [j, ib] : infl_) bump(ib.mu, ib.mu_prev, ib.rho, ib.z, ib.vfun);

  std::vector<std::pair<const Trajectory*, const Trajectory*>> ps;
  if (!approx_dyn_) ps.push_back({&own_.zx, &own_.zx_prev});
  ps.push_back({&own_.zu, &own_.zu_prev});
  if (!approx_dyn_) ps.push_back({&own_.mu_x, &own_.mu_x_prev});
  ps.push_back({&own_.mu_u, &own_.mu_u_prev});
  for (const auto& [j, hb] : held_) {
    if (!approx_dyn_) ps.push_back({&hb.mu_x, &hb.mu_x_prev});
    ps.push_back({&hb.mu_u, &hb.mu_u_prev});
    if (approx_dyn_) ps.push_back({&hb.mu_v, &hb.mu_v_prev});
  }
  for (const auto& [j, ib] : infl_) {
    ps.push_back({&ib.z, &ib.z_prev});
    ps.push_back({&ib.mu, &ib.mu_prev});
  }
  conv_norm_ = setup_.options.sup_norm ? stacked_diff_sup(ps) : stacked_diff_norm(ps);

  record_stats(last_solver_iterations_);
  if (setup_.options.adapt_penalties && q_ >= 2) adapt_all();
}

std::vector<Message> AdmmAgent::multipliers_out() const {
  std::vector<Message> out;
  for (const Edge& e : edges_) {
    const CopyHeld& hb = held_.at(e.id);
    Message m;
    m.kind = MsgKind::multiplier_vals;
    m.from = id();
    m.to = e.id;
    m.q = static_cast<uint32_t>(q_);
    m.x = approx_dyn_ ? Trajectory(setup_.T, setup_.N, 0) : hb.mu_x;
    m.u = hb.mu_u;
    if (approx_dyn_) {
      m.has_v = true;
      m.v = hb.mu_v;
    }
    out.push_back(std::move(m));
  }
  return out;
}

void AdmmAgent::adapt_all() {
  const AdmmOptions& o = setup_.options;
  auto adapt = [&o](Trajectory& rho, const Trajectory& actual, const Trajectory& z,
                    const Trajectory& z_prev) {
    for (int k = 0; k < rho.size(); ++k) {
      for (int c = 0; c < rho.dim(); ++c) {
        const double s = rho(k, c) * (z(k, c) - z_prev(k, c));
        double gamma = 1.0;
        if (std::abs(s) > o.adapt_threshold) {
          gamma = std::min(std::max(std::abs(actual(k, c) - z(k, c)) / std::abs(s), o.gamma_min),
                           o.gamma_max);
        }
        rho(k, c) = std::min(std::max(gamma * rho(k, c), o.rho_min), o.rho_max);
      }
    }
  };
  if (!approx_dyn_) adapt(own_.rho_x, x_, own_.zx, own_.zx_prev);
  adapt(own_.rho_u, u_, own_.zu, own_.zu_prev);
  for (auto& [j, hb] : held_) {
    if (!approx_dyn_) adapt(hb.rho_x, hb.cx, hb.zx, hb.zx_prev);
    adapt(hb.rho_u, hb.cu, hb.zu, hb.zu_prev);
    if (approx_dyn_) adapt(hb.rho_v, hb.cv, hb.zv, hb.zv_prev);
  }
  // mirror the holders' updates so the next averaging divides by their values
  for (auto& [j, mr] : mirror_) {
    if (!approx_dyn_) adapt(mr.rho_x, mr.cx, own_.zx, own_.zx_prev);
    adapt(mr.rho_u, mr.cu, own_.zu, own_.zu_prev);
  }
  for (auto& [j, ib] : infl_) {
    adapt(ib.rho, ib.vfun, ib.z, ib.z_prev);
    adapt(ib.rho_mirror, ib.vbar, ib.z, ib.z_prev);
  }
}

void AdmmAgent::record_stats(int solver_iterations) {
  AdmmIterStats st;
  st.q = q_;
  st.local_cost = local_cost();
  st.conv_norm = conv_norm_;
  st.solver_iterations = solver_iterations;

  double r2 = 0.0, s2 = 0.0;
  auto dual_sq = [&s2](const Trajectory& rho, const Trajectory& z, const Trajectory& zp) {
    for (int k = 0; k < z.size(); ++k)
      for (int c = 0; c < z.dim(); ++c) {
        const double s = rho(k, c) * (z(k, c) - zp(k, c));
        s2 += s * s;
      }
  };
  if (!approx_dyn_) {
    accumulate_sq(r2, x_, own_.zx);
    dual_sq(own_.rho_x, own_.zx, own_.zx_prev);
  }
  accumulate_sq(r2, u_, own_.zu);
  dual_sq(own_.rho_u, own_.zu, own_.zu_prev);
  for (const auto& [j, hb] : held_) {
    if (!approx_dyn_) {
      accumulate_sq(r2, hb.cx, hb.zx);
      dual_sq(hb.rho_x, hb.zx, hb.zx_prev);
    }
    accumulate_sq(r2, hb.cu, hb.zu);
    dual_sq(hb.rho_u, hb.zu, hb.zu_prev);
    if (approx_dyn_) {
      accumulate_sq(r2, hb.cv, hb.zv);
      dual_sq(hb.rho_v, hb.zv, hb.zv_prev);
    }
  }
  for (const auto& [j, ib] : infl_) {
    accumulate_sq(r2, ib.vfun, ib.z);
    dual_sq(ib.rho, ib.z, ib.z_prev);
  }
  st.r_norm = std::sqrt(r2);
  st.s_norm = std::sqrt(s2);

  double lo = kInf, hi = -kInf;
  auto scan = [&lo, &hi](const Trajectory& rho) {
    for (int k = 0; k < rho.size(); ++k)
      for (int c = 0; c < rho.dim(); ++c) {
        lo = std::min(lo, rho(k, c));
        hi = std::max(hi, rho(k, c));
      }
  };
  scan(own_.rho_x);
  scan(own_.rho_u);
  for (const auto& [j, hb] : held_) {
    scan(hb.rho_x);
    scan(hb.rho_u);
    scan(hb.rho_v);
  }
  for (const auto& [j, ib] : infl_) scan(ib.rho);
  st.rho_lo = lo <= hi ? lo : 0.0;
  st.rho_hi = lo <= hi ? hi : 0.0;
  stats_.push_back(st);
}

double AdmmAgent::local_cost() const {
  const AgentModel& m = setup_.model;
  double J = m.V ? m.V(x_.at(x_.size() - 1), setup_.T) : 0.0;
  if (m.l) {
    for (int k = 0; k < x_.size(); ++k)
      J += x_.quad_weight(k) * m.l(x_.at(k), u_.at(k), x_.time(k));
  }
  return J;
}

}  // namespace dmpc
