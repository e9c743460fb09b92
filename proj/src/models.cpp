#include "dmpc/models.hpp"

#include <cmath>
#include <stdexcept>

namespace dmpc {

namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

double pnum(const json& j, const std::string& key, double def) {
  return j.contains(key) ? j.at(key).get<double>() : def;
}

bool pbool(const json& j, const std::string& key, bool def) {
  return j.contains(key) ? j.at(key).get<bool>() : def;
}

Vec pvec(const json& j, const std::string& key, int n, double def) {
  if (!j.contains(key)) return Vec::Constant(n, def);
  const auto v = j.at(key).get<std::vector<double>>();
  if (static_cast<int>(v.size()) != n)
    throw std::invalid_argument("parameter '" + key + "' must have " + std::to_string(n) +
                                " entries");
  return Eigen::Map<const Vec>(v.data(), n);
}

json store_vec(const Vec& v) {
  std::vector<double> out(v.data(), v.data() + v.size());
  return json(out);
}

void finish_agent(AgentModel& m, const json& p, const std::string& key, const Vec& P,
                  const Vec& Q, const Vec& R, const Vec& x_des) {
  m.model_key = key;
  m.x0 = pvec(p, "x0", m.nx, 0.0);
  m.u_min = pvec(p, "u_min", m.nu, -kInf);
  m.u_max = pvec(p, "u_max", m.nu, kInf);
  attach_quadratic_cost(m, P, Q, R, x_des);
  m.params["x0"] = store_vec(m.x0);
  m.params["x_des"] = store_vec(x_des);
  m.params["P"] = store_vec(P);
  m.params["Q"] = store_vec(Q);
  m.params["R"] = store_vec(R);
  if (m.u_min.allFinite()) m.params["u_min"] = store_vec(m.u_min);
  if (m.u_max.allFinite()) m.params["u_max"] = store_vec(m.u_max);
}

AgentModel make_double_integrator(uint32_t id, const json& p) {
  AgentModel m;
  m.id = id;
  m.nx = 2;
  m.nu = 1;
  m.f = [](const Vec& x, const Vec& u, double) -> Vec {
    Vec dx(2);
    dx << x(1), u(0);
    return dx;
  };
  m.dfdx = [](const Vec&, const Vec&, double) -> Mat {
    Mat A = Mat::Zero(2, 2);
    A(0, 1) = 1.0;
    return A;
  };
  m.dfdu = [](const Vec&, const Vec&, double) -> Mat {
    Mat B = Mat::Zero(2, 1);
    B(1, 0) = 1.0;
    return B;
  };
  finish_agent(m, p, "double_integrator", pvec(p, "P", 2, 2.0), pvec(p, "Q", 2, 1.0),
               pvec(p, "R", 1, 0.1), pvec(p, "x_des", 2, 0.0));
  return m;
}

AgentModel make_spring_mass(uint32_t id, const json& p) {
  AgentModel m;
  m.id = id;
  m.nx = 4;  // [px, vx, py, vy]
  m.nu = 2;
  m.f = [](const Vec& x, const Vec& u, double) -> Vec {
    Vec dx(4);
    dx << x(1), u(0), x(3), u(1);
    return dx;
  };
  m.dfdx = [](const Vec&, const Vec&, double) -> Mat {
    Mat A = Mat::Zero(4, 4);
    A(0, 1) = 1.0;
    A(2, 3) = 1.0;
    return A;
  };
  m.dfdu = [](const Vec&, const Vec&, double) -> Mat {
    Mat B = Mat::Zero(4, 2);
    B(1, 0) = 1.0;
    B(3, 1) = 1.0;
    return B;
  };
  Vec Q(4), Pw(4), R(2);
  Q << 5.0, 2.0, 5.0, 2.0;
  Pw << 1.0, 1.0, 1.0, 1.0;
  R << 0.01, 0.01;
  finish_agent(m, p, "spring_mass",
               p.contains("P") ? pvec(p, "P", 4, 0.0) : Pw,
               p.contains("Q") ? pvec(p, "Q", 4, 0.0) : Q,
               p.contains("R") ? pvec(p, "R", 2, 0.0) : R, pvec(p, "x_des", 4, 0.0));
  return m;
}

AgentModel make_grid_bus(uint32_t id, const json& p) {
  AgentModel m;
  m.id = id;
  m.nx = 2;  // [phi, phi_dot]
  const bool controllable = pbool(p, "controllable", false);
  m.nu = controllable ? 1 : 0;
  const double I = pnum(p, "I", 1.0);
  const double Om = pnum(p, "Omega", 1.0);
  const double kap = pnum(p, "kappa", 1e-3);
  const double Psrc = pnum(p, "P_source", 0.0);
  m.params = {{"controllable", controllable}, {"I", I},     {"Omega", Om},
              {"kappa", kap},                 {"P_source", Psrc}};
  m.f = [I, Om, kap, Psrc, controllable](const Vec& x, const Vec& u, double) -> Vec {
    Vec dx(2);
    const double uin = controllable ? u(0) : 0.0;
    dx << x(1), (uin + Psrc - kap * Om * Om) / (I * Om) - 2.0 * (kap / I) * x(1);
    return dx;
  };
  m.dfdx = [I, kap](const Vec&, const Vec&, double) -> Mat {
    Mat A = Mat::Zero(2, 2);
    A(0, 1) = 1.0;
    A(1, 1) = -2.0 * kap / I;
    return A;
  };
  m.dfdu = [I, Om, controllable](const Vec&, const Vec&, double) -> Mat {
    Mat B = Mat::Zero(2, controllable ? 1 : 0);
    if (controllable) B(1, 0) = 1.0 / (I * Om);
    return B;
  };
  Vec Pw(2), Q(2);
  Pw << 0.0, 0.1;
  Q << 0.0, 1.0;
  finish_agent(m, p, "grid_bus",
               p.contains("P") ? pvec(p, "P", 2, 0.0) : Pw,
               p.contains("Q") ? pvec(p, "Q", 2, 0.0) : Q,
               pvec(p, "R", m.nu, 0.01), pvec(p, "x_des", 2, 0.0));
  return m;
}

AgentModel make_water_tank(uint32_t id, const json& p) {
  AgentModel m;
  m.id = id;
  m.nx = 1;  // water height
  const bool pump = pbool(p, "pump", false);
  m.nu = pump ? 1 : 0;
  const double A = pnum(p, "A", 0.1);
  const double d = pnum(p, "d", 0.0);
  const double h_max = pnum(p, "h_max", 3.0);
  const bool limit = pbool(p, "height_limit", true);
  m.params = {{"pump", pump}, {"A", A}, {"d", d}, {"h_max", h_max}, {"height_limit", limit}};
  m.f = [A, d, pump](const Vec&, const Vec& u, double) -> Vec {
    Vec dx(1);
    dx(0) = ((pump ? u(0) : 0.0) - d) / A;
    return dx;
  };
  m.dfdx = [](const Vec&, const Vec&, double) -> Mat { return Mat::Zero(1, 1); };
  m.dfdu = [A, pump](const Vec&, const Vec&, double) -> Mat {
    Mat B = Mat::Zero(1, pump ? 1 : 0);
    if (pump) B(0, 0) = 1.0 / A;
    return B;
  };
  if (limit) {
    m.nh = 1;
    m.h = [h_max](const Vec& x, const Vec&, double) -> Vec {
      Vec v(1);
      v(0) = x(0) - h_max;
      return v;
    };
    m.dhdx = [](const Vec&, const Vec&, double) -> Mat { return Mat::Ones(1, 1); };
    m.dhdu = [](const Vec&, const Vec& u, double) -> Mat { return Mat::Zero(1, u.size()); };
  }
  json q = p;
  if (pump && !p.contains("u_min")) q["u_min"] = {0.0};  // a pump cannot drain
  finish_agent(m, q, "water_tank", pvec(p, "P", 1, 0.0), pvec(p, "Q", 1, 0.0),
               pvec(p, "R", m.nu, 0.0), pvec(p, "x_des", 1, 0.0));
  return m;
}

AgentModel make_van_der_pol(uint32_t id, const json& p) {
  AgentModel m;
  m.id = id;
  m.nx = 2;  // [p, p_dot]
  m.nu = 1;
  const double a1 = pnum(p, "alpha1", 1.0);
  const bool classical = pbool(p, "classical_vdp", false);
  m.params = {{"alpha1", a1}, {"classical_vdp", classical}};
  m.f = [a1, classical](const Vec& x, const Vec& u, double) -> Vec {
    Vec dx(2);
    const double nl = classical ? a1 * (1.0 - x(0) * x(0)) * x(1) : a1 * (1.0 - x(0) * x(0));
    dx << x(1), nl - x(0) + u(0);
    return dx;
  };
  m.dfdx = [a1, classical](const Vec& x, const Vec&, double) -> Mat {
    Mat A = Mat::Zero(2, 2);
    A(0, 1) = 1.0;
    if (classical) {
      A(1, 0) = -2.0 * a1 * x(0) * x(1) - 1.0;
      A(1, 1) = a1 * (1.0 - x(0) * x(0));
    } else {
      A(1, 0) = -2.0 * a1 * x(0) - 1.0;
    }
    return A;
  };
  m.dfdu = [](const Vec&, const Vec&, double) -> Mat {
    Mat B = Mat::Zero(2, 1);
    B(1, 0) = 1.0;
    return B;
  };
  finish_agent(m, p, "van_der_pol", pvec(p, "P", 2, 1.0), pvec(p, "Q", 2, 1.0),
               pvec(p, "R", 1, 0.1), pvec(p, "x_des", 2, 0.0));
  return m;
}

CouplingModel make_spring_link(uint32_t owner, uint32_t neighbor, const json& p) {
  CouplingModel c;
  c.owner = owner;
  c.neighbor = neighbor;
  c.model_key = "spring_link";
  const double spring_c = pnum(p, "c", 0.5);
  const double mass = pnum(p, "m", 7.5);
  const double d0 = pnum(p, "delta0", 1.0);
  const double eps = pnum(p, "eps_reg", 1e-6);
  c.params = {{"c", spring_c}, {"m", mass}, {"delta0", d0}, {"eps_reg", eps}};
  const double cm = spring_c / mass;
  c.f = [cm, d0, eps](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Vec {
    const double dx = xj(0) - xi(0), dy = xj(2) - xi(2);
    const double dist = std::sqrt(dx * dx + dy * dy + eps * eps);
    const double k = cm * (1.0 - d0 / dist);
    Vec out = Vec::Zero(4);
    out(1) = k * dx;
    out(3) = k * dy;
    return out;
  };
  auto jac = [cm, d0, eps](const Vec& xi, const Vec& xj, double sign) -> Mat {
    const double dx = xj(0) - xi(0), dy = xj(2) - xi(2);
    const double dist = std::sqrt(dx * dx + dy * dy + eps * eps);
    const double k = cm * (1.0 - d0 / dist);
    const double K = cm * d0 / (dist * dist * dist);
    Mat J = Mat::Zero(4, 4);
    J(1, 0) = sign * (k + K * dx * dx);
    J(1, 2) = sign * K * dx * dy;
    J(3, 0) = sign * K * dx * dy;
    J(3, 2) = sign * (k + K * dy * dy);
    return J;
  };
  c.dfdxi = [jac](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) {
    return jac(xi, xj, -1.0);
  };
  c.dfdxj = [jac](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) {
    return jac(xi, xj, 1.0);
  };
  c.dfdui = [](const Vec&, const Vec& ui, const Vec&, const Vec&, double) -> Mat {
    return Mat::Zero(4, ui.size());
  };
  c.dfduj = [](const Vec&, const Vec&, const Vec&, const Vec& uj, double) -> Mat {
    return Mat::Zero(4, uj.size());
  };
  return c;
}

CouplingModel make_grid_line(uint32_t owner, uint32_t neighbor, const json& p) {
  CouplingModel c;
  c.owner = owner;
  c.neighbor = neighbor;
  c.model_key = "grid_line";
  const double Pmax = pnum(p, "P_max", 0.1);
  const double I = pnum(p, "I", 1.0);
  const double Om = pnum(p, "Omega", 1.0);
  c.params = {{"P_max", Pmax}, {"I", I}, {"Omega", Om}};
  const double s = Pmax / (I * Om);
  c.f = [s](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Vec {
    Vec out = Vec::Zero(2);
    out(1) = -s * std::sin(xj(0) - xi(0));
    return out;
  };
  c.dfdxi = [s](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Mat {
    Mat J = Mat::Zero(2, 2);
    J(1, 0) = s * std::cos(xj(0) - xi(0));
    return J;
  };
  c.dfdxj = [s](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Mat {
    Mat J = Mat::Zero(2, 2);
    J(1, 0) = -s * std::cos(xj(0) - xi(0));
    return J;
  };
  c.dfdui = [](const Vec&, const Vec& ui, const Vec&, const Vec&, double) -> Mat {
    return Mat::Zero(2, ui.size());
  };
  c.dfduj = [](const Vec&, const Vec&, const Vec&, const Vec& uj, double) -> Mat {
    return Mat::Zero(2, uj.size());
  };
  return c;
}

CouplingModel make_water_pipe(uint32_t owner, uint32_t neighbor, const json& p) {
  CouplingModel c;
  c.owner = owner;
  c.neighbor = neighbor;
  c.model_key = "water_pipe";
  const double a = pnum(p, "a", 0.005);
  const double A = pnum(p, "A", 0.1);
  const double g = pnum(p, "g", 9.81);
  const double eps = pnum(p, "eps_reg", 1e-6);
  c.params = {{"a", a}, {"A", A}, {"g", g}, {"eps_reg", eps}};
  const double aA = a / A;
  const double s2g = std::sqrt(2.0 * g);
  // sign(dh) sqrt(2g|dh|) smoothed as dh sqrt(2g)/sqrt(|dh|+eps)
  c.f = [aA, s2g, eps](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Vec {
    const double dh = xj(0) - xi(0);
    Vec out(1);
    out(0) = aA * s2g * dh / std::sqrt(std::abs(dh) + eps);
    return out;
  };
  auto dflow = [aA, s2g, eps](double dh) {
    const double b = std::abs(dh) + eps;
    return aA * s2g * (0.5 * std::abs(dh) + eps) / (b * std::sqrt(b));
  };
  c.dfdxi = [dflow](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Mat {
    Mat J(1, 1);
    J(0, 0) = -dflow(xj(0) - xi(0));
    return J;
  };
  c.dfdxj = [dflow](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Mat {
    Mat J(1, 1);
    J(0, 0) = dflow(xj(0) - xi(0));
    return J;
  };
  c.dfdui = [](const Vec&, const Vec& ui, const Vec&, const Vec&, double) -> Mat {
    return Mat::Zero(1, ui.size());
  };
  c.dfduj = [](const Vec&, const Vec&, const Vec&, const Vec& uj, double) -> Mat {
    return Mat::Zero(1, uj.size());
  };
  return c;
}

CouplingModel make_vdp_link(uint32_t owner, uint32_t neighbor, const json& p) {
  CouplingModel c;
  c.owner = owner;
  c.neighbor = neighbor;
  c.model_key = "vdp_link";
  const double a2 = pnum(p, "alpha2", 1.0);
  c.params = {{"alpha2", a2}};
  c.f = [a2](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Vec {
    Vec out = Vec::Zero(2);
    out(1) = a2 * (xj(0) - xi(0));
    return out;
  };
  c.dfdxi = [a2](const Vec&, const Vec&, const Vec&, const Vec&, double) -> Mat {
    Mat J = Mat::Zero(2, 2);
    J(1, 0) = -a2;
    return J;
  };
  c.dfdxj = [a2](const Vec&, const Vec&, const Vec&, const Vec&, double) -> Mat {
    Mat J = Mat::Zero(2, 2);
    J(1, 0) = a2;
    return J;
  };
  c.dfdui = [](const Vec&, const Vec& ui, const Vec&, const Vec&, double) -> Mat {
    return Mat::Zero(2, ui.size());
  };
  c.dfduj = [](const Vec&, const Vec&, const Vec&, const Vec& uj, double) -> Mat {
    return Mat::Zero(2, uj.size());
  };
  return c;
}

}  // namespace

AgentModel make_agent(const std::string& key, uint32_t id, const nlohmann::json& params) {
  if (key == "double_integrator") return make_double_integrator(id, params);
  if (key == "spring_mass") return make_spring_mass(id, params);
  if (key == "grid_bus") return make_grid_bus(id, params);
  if (key == "water_tank") return make_water_tank(id, params);
  if (key == "van_der_pol") return make_van_der_pol(id, params);
  throw std::invalid_argument("unknown agent model key '" + key + "'");
}

CouplingModel make_coupling(const std::string& key, uint32_t owner, uint32_t neighbor,
                            const nlohmann::json& params) {
  if (key == "spring_link") return make_spring_link(owner, neighbor, params);
  if (key == "grid_line") return make_grid_line(owner, neighbor, params);
  if (key == "water_pipe") return make_water_pipe(owner, neighbor, params);
  if (key == "vdp_link") return make_vdp_link(owner, neighbor, params);
  throw std::invalid_argument("unknown coupling model key '" + key + "'");
}

std::vector<std::string> agent_model_keys() {
  return {"double_integrator", "spring_mass", "grid_bus", "water_tank", "van_der_pol"};
}

std::vector<std::string> coupling_model_keys() {
  return {"spring_link", "grid_line", "water_pipe", "vdp_link"};
}

namespace presets {

Problem double_integrator(double T, int N) {
  Problem p;
  p.T = T;
  p.N = N;
  nlohmann::json params = {{"x0", {1.0, 0.0}}, {"u_min", {-3.0}}, {"u_max", {3.0}}};
  p.agents.push_back(make_agent("double_integrator", 1, params));
  return p;
}

Problem spring_mass_grid(int rows, int cols, double T, int N) {
  Problem p;
  p.T = T;
  p.N = N;
  auto id_of = [cols](int r, int c) { return static_cast<uint32_t>(r * cols + c + 1); };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const uint32_t id = id_of(r, c);
      const double px = c * 1.0, py = r * 1.0;
      const double ox = 0.3 * std::sin(2.1 * id), oy = 0.3 * std::cos(1.3 * id);
      nlohmann::json params = {{"x0", {px, 0.0, py, 0.0}},
                               {"x_des", {px + ox, 0.0, py + oy, 0.0}}};
      p.agents.push_back(make_agent("spring_mass", id, params));
    }
  auto link = [&](uint32_t a, uint32_t b) {
    p.couplings.push_back(make_coupling("spring_link", a, b, {}));
    p.couplings.push_back(make_coupling("spring_link", b, a, {}));
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (c + 1 < cols) link(id_of(r, c), id_of(r, c + 1));
      if (r + 1 < rows) link(id_of(r, c), id_of(r + 1, c));
    }
  return p;
}

Problem smart_grid_chain(int n_sinks, double T, int N) {
  Problem p;
  p.T = T;
  p.N = N;
  nlohmann::json plant = {{"controllable", true},
                          {"P_source", 0.0},
                          {"u_min", {-0.3}},
                          {"u_max", {0.3}}};
  p.agents.push_back(make_agent("grid_bus", 1, plant));
  for (int s = 0; s < n_sinks; ++s) {
    nlohmann::json sink = {{"controllable", false}, {"P_source", -0.03}};
    p.agents.push_back(make_agent("grid_bus", static_cast<uint32_t>(s + 2), sink));
  }
  for (uint32_t i = 1; i <= static_cast<uint32_t>(n_sinks); ++i) {
    p.couplings.push_back(make_coupling("grid_line", i, i + 1, {}));
    p.couplings.push_back(make_coupling("grid_line", i + 1, i, {}));
  }
  return p;
}

Problem water_tank_chain(int n, double T, int N) {
  Problem p;
  p.T = T;
  p.N = N;
  for (int i = 1; i <= n; ++i) {
    nlohmann::json params = {{"x0", {2.0}}, {"x_des", {3.0}}};
    if (i == 1) {
      params["pump"] = true;
      params["R"] = {0.1};
      params["u_max"] = {0.15};
    }
    if (i == n) {
      params["d"] = 0.01;
      params["P"] = {1.0};
      params["Q"] = {1.0};
    }
    p.agents.push_back(make_agent("water_tank", static_cast<uint32_t>(i), params));
  }
  for (uint32_t i = 1; i < static_cast<uint32_t>(n); ++i) {
    p.couplings.push_back(make_coupling("water_pipe", i, i + 1, {}));
    p.couplings.push_back(make_coupling("water_pipe", i + 1, i, {}));
  }
  return p;
}

Problem van_der_pol_chain(int n, double T, int N, bool classical) {
  Problem p;
  p.T = T;
  p.N = N;
  for (int i = 1; i <= n; ++i) {
    const double p0 = 1.2 * std::sin(1.0 + 2.0 * i);
    nlohmann::json params = {{"x0", {p0, 0.0}}, {"classical_vdp", classical}};
    p.agents.push_back(make_agent("van_der_pol", static_cast<uint32_t>(i), params));
  }
  for (uint32_t i = 1; i < static_cast<uint32_t>(n); ++i) {
    p.couplings.push_back(make_coupling("vdp_link", i, i + 1, {}));
    p.couplings.push_back(make_coupling("vdp_link", i + 1, i, {}));
  }
  return p;
}

}  // namespace presets

}  // namespace dmpc
