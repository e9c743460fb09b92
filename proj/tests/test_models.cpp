#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dmpc/models.hpp"

using namespace dmpc;

namespace {

// central differences of f at (x, u)
void fd_dynamics(const AgentModel& m, const Vec& x, const Vec& u, double t, Mat& A, Mat& B) {
  const double s = 1e-6;
  A.resize(m.nx, m.nx);
  B.resize(m.nx, m.nu);
  for (int i = 0; i < m.nx; ++i) {
    Vec xp = x, xm = x;
    xp(i) += s;
    xm(i) -= s;
    A.col(i) = (m.f(xp, u, t) - m.f(xm, u, t)) / (2 * s);
  }
  for (int i = 0; i < m.nu; ++i) {
    Vec up = u, um = u;
    up(i) += s;
    um(i) -= s;
    B.col(i) = (m.f(x, up, t) - m.f(x, um, t)) / (2 * s);
  }
}

void check_agent_jacobians(const AgentModel& m, unsigned seed, double scale) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (int trial = 0; trial < 25; ++trial) {
    Vec x(m.nx), u(m.nu);
    for (int i = 0; i < m.nx; ++i) x(i) = d(rng) + 1.0;  // keep away from singularities
    for (int i = 0; i < m.nu; ++i) u(i) = d(rng);
    Mat A, B;
    fd_dynamics(m, x, u, 0.0, A, B);
    Mat Aa = m.dfdx(x, u, 0.0), Ba = m.dfdu(x, u, 0.0);
    CHECK((Aa - A).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, A.cwiseAbs().maxCoeff()));
    if (m.nu > 0)
      CHECK((Ba - B).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, B.cwiseAbs().maxCoeff()));
  }
}

void check_coupling_jacobians(const CouplingModel& c, int nx, int nu, unsigned seed,
                              double scale, double offset) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  const double s = 1e-6;
  for (int trial = 0; trial < 25; ++trial) {
    Vec xi(nx), ui(nu), xj(nx), uj(nu);
    for (int i = 0; i < nx; ++i) {
      xi(i) = d(rng) + offset;
      xj(i) = d(rng) - offset;  // keep xi - xj away from zero
    }
    for (int i = 0; i < nu; ++i) {
      ui(i) = d(rng);
      uj(i) = d(rng);
    }
    Mat Jxi(c.f(xi, ui, xj, uj, 0.0).size(), nx), Jxj = Jxi;
    for (int i = 0; i < nx; ++i) {
      Vec p = xi, q = xi;
      p(i) += s;
      q(i) -= s;
      Jxi.col(i) = (c.f(p, ui, xj, uj, 0.0) - c.f(q, ui, xj, uj, 0.0)) / (2 * s);
      p = xj;
      q = xj;
      p(i) += s;
      q(i) -= s;
      Jxj.col(i) = (c.f(xi, ui, p, uj, 0.0) - c.f(xi, ui, q, uj, 0.0)) / (2 * s);
    }
    Mat Ai = c.dfdxi(xi, ui, xj, uj, 0.0), Aj = c.dfdxj(xi, ui, xj, uj, 0.0);
    CHECK((Ai - Jxi).cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, Jxi.cwiseAbs().maxCoeff()));
    CHECK((Aj - Jxj).cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, Jxj.cwiseAbs().maxCoeff()));
  }
}

}  // namespace

TEST_CASE("factory rejects unknown keys and lists the known ones") {
  CHECK_THROWS(make_agent("no_such_model", 1, {}));
  CHECK_THROWS(make_coupling("no_such_link", 1, 2, {}));
  auto ak = agent_model_keys();
  auto ck = coupling_model_keys();
  CHECK(ak.size() == 5);
  CHECK(ck.size() == 4);
  for (const auto& k : ak) CHECK_NOTHROW(make_agent(k, 1, {}));
}

TEST_CASE("double integrator dynamics and jacobians") {
  auto m = make_agent("double_integrator", 1, {});
  CHECK(m.nx == 2);
  CHECK(m.nu == 1);
  Vec x(2), u(1);
  x << 0.5, -2.0;
  u << 0.7;
  Vec dx = m.f(x, u, 0.0);
  CHECK(dx(0) == doctest::Approx(-2.0));
  CHECK(dx(1) == doctest::Approx(0.7));
  check_agent_jacobians(m, 1, 2.0);
}

TEST_CASE("spring mass dynamics match the hand model") {
  nlohmann::json p = {{"x0", {0.0, 0.0, 0.0, 0.0}}};
  auto m = make_agent("spring_mass", 1, p);
  CHECK(m.nx == 4);
  CHECK(m.nu == 2);
  // state layout (p_x, v_x, p_y, v_y); free mass: dp = v, dv = u
  Vec x(4), u(2);
  x << 0.3, -0.1, 0.2, 0.4;
  u << 1.0, -0.5;
  Vec dx = m.f(x, u, 0.0);
  CHECK(dx(0) == doctest::Approx(-0.1));
  CHECK(dx(1) == doctest::Approx(1.0));
  CHECK(dx(2) == doctest::Approx(0.4));
  CHECK(dx(3) == doctest::Approx(-0.5));
  check_agent_jacobians(m, 2, 1.0);

  auto c = make_coupling("spring_link", 1, 2, {});
  // two masses one rest length apart along x: spring force vanishes
  Vec xi(4), ui(2), xj(4), uj(2);
  xi << 0.0, 0.0, 0.0, 0.0;
  xj << 1.0, 0.0, 0.0, 0.0;
  ui.setZero();
  uj.setZero();
  Vec ficp = c.f(xi, ui, xj, uj, 0.0);
  CHECK(ficp.cwiseAbs().maxCoeff() <= 1e-6);
  // stretched to 2x rest length: attraction toward the neighbor
  xj(0) = 2.0;
  Vec fs = c.f(xi, ui, xj, uj, 0.0);
  CHECK(fs(1) > 0.01);
  CHECK(std::abs(fs(0)) <= 1e-12);  // only the velocity rows are forced
  CHECK(std::abs(fs(2)) <= 1e-12);
  check_coupling_jacobians(c, 4, 2, 3, 0.4, 1.0);
}

TEST_CASE("grid bus dynamics match the swing equation") {
  auto m = make_agent("grid_bus", 1, {{"P_source", 0.05}, {"controllable", true}});
  CHECK(m.nx == 2);
  CHECK(m.nu == 1);
  Vec x(2), u(1);
  x << 0.1, 0.02;
  u << 0.01;
  // I = Omega = 1, kappa = 1e-3:
  // dphi = x1, ddphi = (u + P_src - kappa) - 2 kappa x1
  Vec dx = m.f(x, u, 0.0);
  CHECK(dx(0) == doctest::Approx(0.02));
  CHECK(dx(1) == doctest::Approx((0.01 + 0.05 - 1e-3) - 2e-3 * 0.02));
  check_agent_jacobians(m, 4, 0.5);

  auto sink = make_agent("grid_bus", 2, {});
  CHECK(sink.nu == 0);  // buses are passive unless marked controllable

  auto c = make_coupling("grid_line", 1, 2, {});
  Vec xi(2), ui(1), xj(2), uj(1);
  xi << 0.2, 0.0;
  xj << 0.5, 0.0;
  ui << 0.0;
  uj << 0.0;
  Vec f = c.f(xi, ui, xj, uj, 0.0);
  CHECK(f(0) == doctest::Approx(0.0));
  // a leading neighbor phase drains power from the owner bus
  CHECK(f(1) == doctest::Approx(-0.1 * std::sin(0.3)));  // P_max = 0.1
  check_coupling_jacobians(c, 2, 1, 5, 0.6, 0.2);
}

TEST_CASE("water tank dynamics and pipe flow") {
  auto m = make_agent("water_tank", 1, {{"d", 0.01}, {"pump", true}});
  CHECK(m.nx == 1);
  CHECK(m.nu == 1);
  Vec x(1), u(1);
  x << 2.0;
  u << 0.03;
  // A = 0.1: dh = (u - d) / A
  CHECK(m.f(x, u, 0.0)(0) == doctest::Approx((0.03 - 0.01) / 0.1));
  CHECK(m.nh == 1);
  Vec hx(1);
  hx << 3.5;
  CHECK(m.h(hx, u, 0.0)(0) > 0.0);  // above the cap
  hx << 2.5;
  CHECK(m.h(hx, u, 0.0)(0) < 0.0);
  check_agent_jacobians(m, 6, 1.0);

  auto c = make_coupling("water_pipe", 1, 2, {});
  Vec xi(1), xj(1), e(1), ee(1);
  xi << 1.0;
  xj << 2.0;
  e << 0.0;
  ee << 0.0;
  // higher neighbor level raises the owner level
  CHECK(c.f(xi, e, xj, e, 0.0)(0) > 0.0);
  // antisymmetry of the flow
  CHECK(c.f(xi, e, xj, e, 0.0)(0) == doctest::Approx(-c.f(xj, e, xi, e, 0.0)(0)).epsilon(1e-9));
  // equal levels: no flow
  CHECK(std::abs(c.f(xj, e, xj, e, 0.0)(0)) <= 1e-9);
  check_coupling_jacobians(c, 1, 1, 7, 0.4, 1.0);
}

TEST_CASE("van der pol dynamics with and without the classical damping factor") {
  auto m = make_agent("van_der_pol", 1, {});
  Vec x(2), u(1);
  x << 0.5, 0.3;
  u << 0.1;
  // alpha1 = 1: dv = alpha1 (1 - p^2) - p + u
  Vec dx = m.f(x, u, 0.0);
  CHECK(dx(0) == doctest::Approx(0.3));
  CHECK(dx(1) == doctest::Approx((1.0 - 0.25) - 0.5 + 0.1));
  check_agent_jacobians(m, 8, 1.5);

  auto mc = make_agent("van_der_pol", 1, {{"classical_vdp", true}});
  Vec dxc = mc.f(x, u, 0.0);
  CHECK(dxc(1) == doctest::Approx((1.0 - 0.25) * 0.3 - 0.5 + 0.1));
  check_agent_jacobians(mc, 9, 1.5);

  auto c = make_coupling("vdp_link", 1, 2, {});
  Vec xi(2), xj(2), e(1);
  xi << 0.4, 0.0;
  xj << 0.9, 0.0;
  e << 0.0;
  Vec f = c.f(xi, e, xj, e, 0.0);
  CHECK(f(0) == doctest::Approx(0.0));
  CHECK(f(1) == doctest::Approx(0.5));  // alpha2 (p_j - p_i)
  check_coupling_jacobians(c, 2, 1, 10, 1.0, 0.3);
}

TEST_CASE("default weights carry the intended tuning") {
  auto sm = make_agent("spring_mass", 1, {});
  CHECK(sm.Q(0) == doctest::Approx(5.0));
  CHECK(sm.Q(1) == doctest::Approx(2.0));
  CHECK(sm.Q(2) == doctest::Approx(5.0));
  CHECK(sm.P(0) == doctest::Approx(1.0));
  CHECK(sm.R(0) == doctest::Approx(0.01));
  CHECK(sm.R(1) == doctest::Approx(0.01));

  auto gb = make_agent("grid_bus", 1, {{"controllable", true}});
  CHECK(gb.P(0) == doctest::Approx(0.0));
  CHECK(gb.P(1) == doctest::Approx(0.1));
  CHECK(gb.Q(0) == doctest::Approx(0.0));
  CHECK(gb.Q(1) == doctest::Approx(1.0));
  CHECK(gb.R(0) == doctest::Approx(0.01));

  auto vdp = make_agent("van_der_pol", 1, {});
  CHECK(vdp.Q(0) == doctest::Approx(1.0));
  CHECK(vdp.Q(1) == doctest::Approx(1.0));
  CHECK(vdp.P(0) == doctest::Approx(1.0));
  CHECK(vdp.R(0) == doctest::Approx(0.1));
}

TEST_CASE("resolved parameters round-trip through the factory") {
  nlohmann::json p = {{"x0", {1.5, -0.5}}, {"P_source", 0.07}};
  auto m = make_agent("grid_bus", 3, p);
  auto m2 = make_agent(m.model_key, m.id, m.params);
  CHECK(m2.id == 3);
  CHECK((m2.x0 - m.x0).norm() == 0.0);
  Vec x(2), u(1);
  x << 0.3, -0.2;
  u << 0.05;
  CHECK(m2.f(x, u, 0.0)(1) == doctest::Approx(m.f(x, u, 0.0)(1)));
}

TEST_CASE("spring mass grid preset wires a full lattice") {
  auto p = presets::spring_mass_grid(3, 3, 2.0, 21);
  CHECK(p.agents.size() == 9);
  auto g = p.graph();
  // corner, edge, interior mass degrees
  CHECK(g.neighborhood(1).size() == 2);
  CHECK(g.neighborhood(2).size() == 3);
  CHECK(g.neighborhood(5).size() == 4);
  // bidirectional: every edge has its mirror
  for (uint32_t id : g.ids()) CHECK(g.sending(id) == g.receiving(id));
  CHECK(validate(p).empty());
}

TEST_CASE("smart grid chain has one plant and passive sinks") {
  auto p = presets::smart_grid_chain(3, 10.0, 21);
  CHECK(p.agents.size() == 4);
  CHECK(p.agents[0].nu == 1);
  for (size_t i = 1; i < p.agents.size(); ++i) CHECK(p.agents[i].nu == 0);
  auto g = p.graph();
  CHECK(g.neighborhood(1) == std::vector<uint32_t>{2});
  CHECK(g.neighborhood(2) == std::vector<uint32_t>{1, 3});
  CHECK(validate(p).empty());
}

TEST_CASE("water tank chain puts the pump first and the setpoint last") {
  auto p = presets::water_tank_chain(4, 100.0, 21);
  CHECK(p.agents.size() == 4);
  CHECK(p.agents[0].nu == 1);
  CHECK(p.agents[0].u_min(0) == doctest::Approx(0.0));
  for (auto& a : p.agents) CHECK(a.nh == 1);
  // only the last tank tracks a level
  CHECK(p.agents[3].Q(0) > 0.0);
  CHECK(p.agents[1].Q(0) == doctest::Approx(0.0));
  CHECK(p.agents[3].x_des(0) == doctest::Approx(3.0));
  CHECK(validate(p).empty());
}

TEST_CASE("van der pol chain preset validates") {
  auto p = presets::van_der_pol_chain(3, 3.0, 31);
  CHECK(p.agents.size() == 3);
  CHECK(validate(p).empty());
  auto g = p.graph();
  CHECK(g.neighborhood(2) == std::vector<uint32_t>{1, 3});
}
