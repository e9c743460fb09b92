#include "dmpc/grad_solver.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dmpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool finite(double v) { return std::isfinite(v); }

}  // namespace

HamiltonianEval hamiltonian(const OcpInstance& ocp, double t, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& nu_g, const Eigen::VectorXd& c_g,
                            const Eigen::VectorXd& nu_h, const Eigen::VectorXd& c_h) {
  HamiltonianEval out;
  out.H = ocp.l(t, x, u) + lambda.dot(ocp.f(t, x, u));
  out.Hx = ocp.dldx(t, x, u) + ocp.dfdx(t, x, u).transpose() * lambda;
  out.Hu = ocp.dldu(t, x, u) + ocp.dfdu(t, x, u).transpose() * lambda;
  if (ocp.ng > 0) {
    const Eigen::VectorXd gv = ocp.g(t, x, u);
    const Eigen::VectorXd w = nu_g + c_g.cwiseProduct(gv);
    out.H += nu_g.dot(gv) + 0.5 * gv.dot(c_g.cwiseProduct(gv));
    out.Hx += ocp.dgdx(t, x, u).transpose() * w;
    out.Hu += ocp.dgdu(t, x, u).transpose() * w;
  }
  if (ocp.nh > 0) {
    const Eigen::VectorXd hv = ocp.h(t, x, u);
    Eigen::VectorXd w(ocp.nh);
    for (int m = 0; m < ocp.nh; ++m) {
      if (hv(m) + nu_h(m) / c_h(m) > 0.0) {
        out.H += nu_h(m) * hv(m) + 0.5 * c_h(m) * hv(m) * hv(m);
        w(m) = nu_h(m) + c_h(m) * hv(m);
      } else {
        out.H += -0.5 * nu_h(m) * nu_h(m) / c_h(m);
        w(m) = 0.0;
      }
    }
    out.Hx += ocp.dhdx(t, x, u).transpose() * w;
    out.Hu += ocp.dhdu(t, x, u).transpose() * w;
  }
  return out;
}

GradSolver::GradSolver(OcpInstance ocp, SolverConfig cfg) : ocp_(std::move(ocp)), cfg_(cfg) {
  if (!ocp_.f || !ocp_.l || !ocp_.V) throw std::invalid_argument("ocp missing f, l or V");
  if (ocp_.x0.size() != ocp_.nx) throw std::invalid_argument("ocp x0 dim mismatch");
  if (ocp_.N < 2) throw std::invalid_argument("ocp grid too small");
}

Trajectory GradSolver::forward(const Trajectory& u) const {
  if (u.size() != ocp_.N || u.dim() != ocp_.nu)
    throw std::invalid_argument("forward: control grid mismatch");
  Trajectory x(ocp_.T, ocp_.N, ocp_.nx);
  x.set(0, ocp_.x0);
  const double h = x.dt();
  Eigen::VectorXd xk = ocp_.x0;
  for (int k = 0; k + 1 < ocp_.N; ++k) {
    const double tk = x.time(k);
    const Eigen::VectorXd uk = u.at(k);
    const Eigen::VectorXd uk1 = u.at(k + 1);
    if (cfg_.integrator == Integrator::rk4) {
      const Eigen::VectorXd um = 0.5 * (uk + uk1);
      const Eigen::VectorXd k1 = ocp_.f(tk, xk, uk);
      const Eigen::VectorXd k2 = ocp_.f(tk + 0.5 * h, xk + 0.5 * h * k1, um);
      const Eigen::VectorXd k3 = ocp_.f(tk + 0.5 * h, xk + 0.5 * h * k2, um);
      const Eigen::VectorXd k4 = ocp_.f(tk + h, xk + h * k3, uk1);
      xk += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } else {
      const Eigen::VectorXd k1 = ocp_.f(tk, xk, uk);
      const Eigen::VectorXd k2 = ocp_.f(tk + h, xk + h * k1, uk1);
      xk += 0.5 * h * (k1 + k2);
    }
    x.set(k + 1, xk);
  }
  return x;
}

double GradSolver::stage_cost(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                              const AugLagState& al) const {
  const double t = k * ocp_.T / (ocp_.N - 1);
  double L = ocp_.l(t, x, u);
  if (ocp_.ng > 0) {
    const Eigen::VectorXd gv = ocp_.g(t, x, u);
    for (int m = 0; m < ocp_.ng; ++m)
      L += al.nu_g(k, m) * gv(m) + 0.5 * al.c_g(k, m) * gv(m) * gv(m);
  }
  if (ocp_.nh > 0) {
    const Eigen::VectorXd hv = ocp_.h(t, x, u);
    for (int m = 0; m < ocp_.nh; ++m) {
      const double nu = al.nu_h(k, m), c = al.c_h(k, m);
      if (hv(m) + nu / c > 0.0)
        L += nu * hv(m) + 0.5 * c * hv(m) * hv(m);
      else
        L += -0.5 * nu * nu / c;
    }
  }
  return L;
}

void GradSolver::stage_cost_grad(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                 const AugLagState& al, Eigen::VectorXd& Lx,
                                 Eigen::VectorXd& Lu) const {
  const double t = k * ocp_.T / (ocp_.N - 1);
  Lx = ocp_.dldx(t, x, u);
  Lu = ocp_.dldu(t, x, u);
  if (ocp_.ng > 0) {
    const Eigen::VectorXd gv = ocp_.g(t, x, u);
    Eigen::VectorXd w(ocp_.ng);
    for (int m = 0; m < ocp_.ng; ++m) w(m) = al.nu_g(k, m) + al.c_g(k, m) * gv(m);
    Lx += ocp_.dgdx(t, x, u).transpose() * w;
    Lu += ocp_.dgdu(t, x, u).transpose() * w;
  }
  if (ocp_.nh > 0) {
    const Eigen::VectorXd hv = ocp_.h(t, x, u);
    Eigen::VectorXd w(ocp_.nh);
    for (int m = 0; m < ocp_.nh; ++m) {
      const double nu = al.nu_h(k, m), c = al.c_h(k, m);
      w(m) = (hv(m) + nu / c > 0.0) ? nu + c * hv(m) : 0.0;
    }
    Lx += ocp_.dhdx(t, x, u).transpose() * w;
    Lu += ocp_.dhdu(t, x, u).transpose() * w;
  }
}

double GradSolver::cost(const Trajectory& x, const Trajectory& u) const {
  double J = ocp_.V(x.at(ocp_.N - 1), u.at(ocp_.N - 1));
  for (int k = 0; k < ocp_.N; ++k) J += x.quad_weight(k) * ocp_.l(x.time(k), x.at(k), u.at(k));
  return finite(J) ? J : kInf;
}

double GradSolver::augmented_cost(const Trajectory& x, const Trajectory& u,
                                  const AugLagState& al) const {
  double J = ocp_.V(x.at(ocp_.N - 1), u.at(ocp_.N - 1));
  for (int k = 0; k < ocp_.N; ++k) J += x.quad_weight(k) * stage_cost(k, x.at(k), u.at(k), al);
  return finite(J) ? J : kInf;
}

BackwardResult GradSolver::backward(const Trajectory& x, const Trajectory& u,
                                    const AugLagState& al) const {
  const int N = ocp_.N, nx = ocp_.nx, nu = ocp_.nu;
  const double h = x.dt();
  BackwardResult out{Trajectory(ocp_.T, N, nx), Trajectory(ocp_.T, N, nu)};

  Eigen::VectorXd Vx = ocp_.dVdx(x.at(N - 1), u.at(N - 1));
  Eigen::VectorXd Vu = ocp_.dVdu ? ocp_.dVdu(x.at(N - 1), u.at(N - 1))
                                 : Eigen::VectorXd(Eigen::VectorXd::Zero(nu));
  out.lambda.set(N - 1, Vx);

  Eigen::VectorXd Lx(nx), Lu(nu);
  stage_cost_grad(N - 1, x.at(N - 1), u.at(N - 1), al, Lx, Lu);
  out.grad_u.set(N - 1, Vu + x.quad_weight(N - 1) * Lu);
  Eigen::VectorXd a = Vx + x.quad_weight(N - 1) * Lx;

  for (int k = N - 2; k >= 0; --k) {
    const double tk = x.time(k);
    const Eigen::VectorXd xk = x.at(k);
    const Eigen::VectorXd uk = u.at(k);
    const Eigen::VectorXd uk1 = u.at(k + 1);
    Eigen::VectorXd xb, ukb = Eigen::VectorXd::Zero(nu), uk1b = Eigen::VectorXd::Zero(nu);

    if (cfg_.integrator == Integrator::rk4) {
      const double tm = tk + 0.5 * h;
      const Eigen::VectorXd um = 0.5 * (uk + uk1);
      const Eigen::VectorXd k1 = ocp_.f(tk, xk, uk);
      const Eigen::VectorXd x2 = xk + 0.5 * h * k1;
      const Eigen::VectorXd k2 = ocp_.f(tm, x2, um);
      const Eigen::VectorXd x3 = xk + 0.5 * h * k2;
      const Eigen::VectorXd k3 = ocp_.f(tm, x3, um);
      const Eigen::VectorXd x4 = xk + h * k3;

      Eigen::VectorXd k1b = (h / 6.0) * a;
      Eigen::VectorXd k2b = (h / 3.0) * a;
      Eigen::VectorXd k3b = (h / 3.0) * a;
      Eigen::VectorXd k4b = (h / 6.0) * a;
      xb = a;
      Eigen::VectorXd umb = Eigen::VectorXd::Zero(nu);

      Eigen::VectorXd x4b = ocp_.dfdx(tk + h, x4, uk1).transpose() * k4b;
      uk1b += ocp_.dfdu(tk + h, x4, uk1).transpose() * k4b;
      xb += x4b;
      k3b += h * x4b;

      Eigen::VectorXd x3b = ocp_.dfdx(tm, x3, um).transpose() * k3b;
      umb += ocp_.dfdu(tm, x3, um).transpose() * k3b;
      xb += x3b;
      k2b += 0.5 * h * x3b;

      Eigen::VectorXd x2b = ocp_.dfdx(tm, x2, um).transpose() * k2b;
      umb += ocp_.dfdu(tm, x2, um).transpose() * k2b;
      xb += x2b;
      k1b += 0.5 * h * x2b;

      xb += ocp_.dfdx(tk, xk, uk).transpose() * k1b;
      ukb += ocp_.dfdu(tk, xk, uk).transpose() * k1b;
      ukb += 0.5 * umb;
      uk1b += 0.5 * umb;
    } else {
      const Eigen::VectorXd k1 = ocp_.f(tk, xk, uk);
      const Eigen::VectorXd xe = xk + h * k1;
      Eigen::VectorXd k1b = 0.5 * h * a;
      const Eigen::VectorXd k2b = 0.5 * h * a;
      xb = a;
      Eigen::VectorXd xeb = ocp_.dfdx(tk + h, xe, uk1).transpose() * k2b;
      uk1b += ocp_.dfdu(tk + h, xe, uk1).transpose() * k2b;
      xb += xeb;
      k1b += h * xeb;
      xb += ocp_.dfdx(tk, xk, uk).transpose() * k1b;
      ukb += ocp_.dfdu(tk, xk, uk).transpose() * k1b;
    }

    out.grad_u.set(k + 1, out.grad_u.at(k + 1) + uk1b);
    stage_cost_grad(k, xk, uk, al, Lx, Lu);
    out.grad_u.set(k, ukb + x.quad_weight(k) * Lu);
    out.lambda.set(k, xb);
    a = xb + x.quad_weight(k) * Lx;
  }
  return out;
}

Trajectory GradSolver::project(Trajectory u) const {
  for (int k = 0; k < u.size(); ++k)
    for (int c = 0; c < u.dim(); ++c)
      u(k, c) = std::min(std::max(u(k, c), ocp_.u_min(c)), ocp_.u_max(c));
  return u;
}

SolveResult GradSolver::projected_gradient_solve(const Trajectory& u_init,
                                                 const AugLagState& al) const {
  SolveResult res;
  res.u = project(u_init);
  res.x = forward(res.u);
  res.aug_cost = augmented_cost(res.x, res.u, al);
  if (ocp_.nu == 0 || cfg_.max_gradient_iterations == 0) {
    res.cost = cost(res.x, res.u);
    res.converged = true;
    return res;
  }

  double alpha = cfg_.alpha0;
  double J = res.aug_cost;
  for (int it = 0; it < cfg_.max_gradient_iterations; ++it) {
    const BackwardResult bw = backward(res.x, res.u, al);

    // function-space scaling: quadrature weights divided out so the step
    // size is grid-independent
    Trajectory dir = bw.grad_u;
    for (int k = 0; k < dir.size(); ++k) {
      const double w = dir.quad_weight(k);
      for (int c = 0; c < dir.dim(); ++c) dir(k, c) /= w;
    }

    bool accepted = false;
    double Jc = J;
    Trajectory uc = res.u, xc = res.x;
    while (alpha >= cfg_.alpha_min) {
      uc = res.u;
      for (int k = 0; k < uc.size(); ++k)
        for (int c = 0; c < uc.dim(); ++c) uc(k, c) -= alpha * dir(k, c);
      uc = project(std::move(uc));
      double pred = 0.0;  // <grad, uc - u>, negative along the projection arc
      for (int k = 0; k < uc.size(); ++k)
        for (int c = 0; c < uc.dim(); ++c)
          pred += bw.grad_u(k, c) * (uc(k, c) - res.u(k, c));
      if (pred >= 0.0) break;  // stationary within the box
      xc = forward(uc);
      Jc = augmented_cost(xc, uc, al);
      if (Jc <= J + cfg_.armijo_sigma * pred) {
        accepted = true;
        break;
      }
      alpha *= cfg_.backtrack;
    }

    res.gradient_iterations = it + 1;
    if (!accepted) {
      res.stalled = alpha < cfg_.alpha_min;
      res.converged = !res.stalled;
      break;
    }
    res.u = std::move(uc);
    res.x = std::move(xc);
    const double drop = J - Jc;
    J = Jc;
    alpha = std::min(alpha / cfg_.backtrack, cfg_.alpha_max);
    if (drop <= cfg_.rel_cost_tol * std::max(1.0, std::abs(J))) {
      res.converged = true;
      break;
    }
  }
  res.aug_cost = J;
  res.cost = cost(res.x, res.u);
  return res;
}

AugLagState GradSolver::make_al_state() const {
  AugLagState al;
  if (ocp_.ng > 0) {
    al.nu_g = Trajectory(ocp_.T, ocp_.N, ocp_.ng);
    al.c_g = Trajectory(ocp_.T, ocp_.N, ocp_.ng);
    al.c_g.values().setConstant(cfg_.c0);
    al.prev_viol_g = Eigen::VectorXd::Zero(ocp_.ng);
  }
  if (ocp_.nh > 0) {
    al.nu_h = Trajectory(ocp_.T, ocp_.N, ocp_.nh);
    al.c_h = Trajectory(ocp_.T, ocp_.N, ocp_.nh);
    al.c_h.values().setConstant(cfg_.c0);
    al.prev_viol_h = Eigen::VectorXd::Zero(ocp_.nh);
  }
  al.initialized = true;
  return al;
}

void GradSolver::violations(const Trajectory& x, const Trajectory& u, Eigen::VectorXd& viol_g,
                            Eigen::VectorXd& viol_h) const {
  viol_g = Eigen::VectorXd::Zero(std::max(ocp_.ng, 0));
  viol_h = Eigen::VectorXd::Zero(std::max(ocp_.nh, 0));
  for (int k = 0; k < ocp_.N; ++k) {
    if (ocp_.ng > 0) {
      const Eigen::VectorXd gv = ocp_.g(x.time(k), x.at(k), u.at(k));
      for (int m = 0; m < ocp_.ng; ++m) viol_g(m) = std::max(viol_g(m), std::abs(gv(m)));
    }
    if (ocp_.nh > 0) {
      const Eigen::VectorXd hv = ocp_.h(x.time(k), x.at(k), u.at(k));
      for (int m = 0; m < ocp_.nh; ++m) viol_h(m) = std::max(viol_h(m), std::max(0.0, hv(m)));
    }
  }
}

SolveResult GradSolver::solve(const Trajectory& u_init, AugLagState& al) const {
  if (!al.initialized) al = make_al_state();
  if (ocp_.ng == 0 && ocp_.nh == 0) {
    SolveResult res = projected_gradient_solve(u_init, al);
    res.multiplier_iterations = 0;
    return res;
  }

  SolveResult res;
  Trajectory u = u_init;
  for (int outer = 0; outer < cfg_.max_multiplier_iterations; ++outer) {
    res = projected_gradient_solve(u, al);
    res.multiplier_iterations = outer + 1;
    u = res.u;

    Eigen::VectorXd viol_g, viol_h;
    violations(res.x, res.u, viol_g, viol_h);
    double worst = 0.0;
    if (viol_g.size()) worst = std::max(worst, viol_g.maxCoeff());
    if (viol_h.size()) worst = std::max(worst, viol_h.maxCoeff());
    res.max_violation = worst;
    if (worst <= cfg_.constraint_tol) break;

    // steepest ascent in the multipliers, then grow the penalty wherever the
    // violation did not drop enough
    for (int k = 0; k < ocp_.N; ++k) {
      if (ocp_.ng > 0) {
        const Eigen::VectorXd gv = ocp_.g(res.x.time(k), res.x.at(k), res.u.at(k));
        for (int m = 0; m < ocp_.ng; ++m) al.nu_g(k, m) += al.c_g(k, m) * gv(m);
      }
      if (ocp_.nh > 0) {
        const Eigen::VectorXd hv = ocp_.h(res.x.time(k), res.x.at(k), res.u.at(k));
        for (int m = 0; m < ocp_.nh; ++m)
          al.nu_h(k, m) = std::max(0.0, al.nu_h(k, m) + al.c_h(k, m) * hv(m));
      }
    }
    if (al.prev_viol_g.size() || al.prev_viol_h.size()) {
      bool had_prev = outer > 0 || al.prev_viol_g.cwiseAbs().sum() > 0.0 ||
                      (al.prev_viol_h.size() && al.prev_viol_h.cwiseAbs().sum() > 0.0);
      if (had_prev) {
        for (int m = 0; m < ocp_.ng; ++m)
          if (viol_g(m) > cfg_.viol_decrease * al.prev_viol_g(m))
            for (int k = 0; k < ocp_.N; ++k)
              al.c_g(k, m) = std::min(al.c_g(k, m) * cfg_.c_growth, cfg_.c_max);
        for (int m = 0; m < ocp_.nh; ++m)
          if (viol_h(m) > cfg_.viol_decrease * al.prev_viol_h(m))
            for (int k = 0; k < ocp_.N; ++k)
              al.c_h(k, m) = std::min(al.c_h(k, m) * cfg_.c_growth, cfg_.c_max);
      }
    }
    if (viol_g.size()) al.prev_viol_g = viol_g;
    if (viol_h.size()) al.prev_viol_h = viol_h;
  }
  return res;
}

SolveResult GradSolver::solve(const Trajectory& u_init) const {
  AugLagState al = make_al_state();
  return solve(u_init, al);
}

Eigen::VectorXd integrate_ode(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
    Eigen::VectorXd x, double t0, double t1, int substeps) {
  if (substeps < 1) throw std::invalid_argument("integrate_ode: substeps must be >= 1");
  const double h = (t1 - t0) / substeps;
  double t = t0;
  for (int s = 0; s < substeps; ++s) {
    const Eigen::VectorXd k1 = f(t, x);
    const Eigen::VectorXd k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
    const Eigen::VectorXd k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
    const Eigen::VectorXd k4 = f(t + h, x + h * k3);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += h;
  }
  return x;
}

}  // namespace dmpc
