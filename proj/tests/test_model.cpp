#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dmpc/model.hpp"
#include "dmpc/models.hpp"

using namespace dmpc;

namespace {

AgentModel minimal_agent(uint32_t id) {
  AgentModel m;
  m.id = id;
  m.nx = 2;
  m.nu = 1;
  m.x0 = Vec::Zero(2);
  m.u_min = Vec::Constant(1, -1.0);
  m.u_max = Vec::Constant(1, 1.0);
  m.f = [](const Vec& x, const Vec& u, double) {
    Vec dx(2);
    dx << x(1), u(0);
    return dx;
  };
  attach_fd_jacobians(m);
  attach_quadratic_cost(m, Vec::Ones(2), Vec::Ones(2), Vec::Ones(1), Vec::Zero(2));
  return m;
}

}  // namespace

TEST_CASE("quadratic cost evaluates the half-weighted squared norms") {
  AgentModel m = minimal_agent(1);
  Vec P(2), Q(2), R(1), xd(2);
  P << 6.0, 6.0;
  Q << 2.0, 4.0;
  R << 2.0;
  xd << 0.0, 0.0;
  attach_quadratic_cost(m, P, Q, R, xd);

  Vec x(2), u(1);
  x << 1.0, 1.0;
  u << 1.0;
  CHECK(m.l(x, u, 0.0) == doctest::Approx(4.0));   // (2+4)/2 + 2/2
  CHECK(m.V(x, 0.0) == doctest::Approx(6.0));      // (6+6)/2

  Vec xd2(2);
  xd2 << 1.0, 0.0;
  attach_quadratic_cost(m, P, Q, R, xd2);
  CHECK(m.l(x, u, 0.0) == doctest::Approx(0.5 * 4.0 + 1.0));
  CHECK(m.V(x, 0.0) == doctest::Approx(3.0));
}

TEST_CASE("quadratic cost gradients match finite differences") {
  AgentModel m = minimal_agent(1);
  Vec P(2), Q(2), R(1), xd(2);
  P << 2.5, 0.5;
  Q << 1.0, 3.0;
  R << 0.7;
  xd << 0.3, -0.4;
  attach_quadratic_cost(m, P, Q, R, xd);

  std::mt19937 rng(11);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  const double step = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    Vec x(2), u(1);
    x << d(rng), d(rng);
    u << d(rng);
    Vec gx = m.dldx(x, u, 0.0);
    Vec gu = m.dldu(x, u, 0.0);
    Vec gT = m.dVdx(x, 0.0);
    for (int i = 0; i < 2; ++i) {
      Vec xp = x, xm = x;
      xp(i) += step;
      xm(i) -= step;
      CHECK(gx(i) == doctest::Approx((m.l(xp, u, 0) - m.l(xm, u, 0)) / (2 * step)).epsilon(1e-6));
      CHECK(gT(i) == doctest::Approx((m.V(xp, 0) - m.V(xm, 0)) / (2 * step)).epsilon(1e-6));
    }
    Vec up = u, um = u;
    up(0) += step;
    um(0) -= step;
    CHECK(gu(0) == doctest::Approx((m.l(x, up, 0) - m.l(x, um, 0)) / (2 * step)).epsilon(1e-6));
  }
}

TEST_CASE("quadratic cost rejects mismatched weight dimensions") {
  AgentModel m = minimal_agent(1);
  CHECK_THROWS(attach_quadratic_cost(m, Vec::Ones(3), Vec::Ones(2), Vec::Ones(1), Vec::Zero(2)));
  CHECK_THROWS(attach_quadratic_cost(m, Vec::Ones(2), Vec::Ones(2), Vec::Ones(2), Vec::Zero(2)));
  CHECK_THROWS(attach_quadratic_cost(m, Vec::Ones(2), Vec::Ones(2), Vec::Ones(1), Vec::Zero(1)));
}

TEST_CASE("finite difference jacobians match an analytic nonlinear model") {
  AgentModel m;
  m.id = 1;
  m.nx = 2;
  m.nu = 1;
  m.x0 = Vec::Zero(2);
  m.u_min = Vec::Constant(1, -5.0);
  m.u_max = Vec::Constant(1, 5.0);
  m.f = [](const Vec& x, const Vec& u, double) {
    Vec dx(2);
    dx << x(1) * std::cos(x(0)), u(0) * u(0) - std::sin(x(1));
    return dx;
  };
  attach_fd_jacobians(m);

  Vec x(2), u(1);
  x << 0.7, -0.3;
  u << 1.2;
  Mat A = m.dfdx(x, u, 0.0);
  Mat B = m.dfdu(x, u, 0.0);
  CHECK(A(0, 0) == doctest::Approx(-x(1) * std::sin(x(0))).epsilon(1e-7));
  CHECK(A(0, 1) == doctest::Approx(std::cos(x(0))).epsilon(1e-7));
  CHECK(A(1, 0) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(A(1, 1) == doctest::Approx(-std::cos(x(1))).epsilon(1e-7));
  CHECK(B(1, 0) == doctest::Approx(2.0 * u(0)).epsilon(1e-7));
}

TEST_CASE("finite difference jacobians cover coupling terms") {
  CouplingModel c;
  c.owner = 1;
  c.neighbor = 2;
  c.f = [](const Vec& xi, const Vec&, const Vec& xj, const Vec& uj, double) {
    Vec v(2);
    v << std::sin(xj(0) - xi(0)), uj(0) * xj(1);
    return v;
  };
  attach_fd_jacobians(c);

  Vec xi(2), ui(1), xj(2), uj(1);
  xi << 0.2, 0.1;
  ui << 0.0;
  xj << -0.5, 0.9;
  uj << 0.4;
  Mat Ji = c.dfdxi(xi, ui, xj, uj, 0.0);
  Mat Jj = c.dfdxj(xi, ui, xj, uj, 0.0);
  Mat Ju = c.dfduj(xi, ui, xj, uj, 0.0);
  const double cs = std::cos(xj(0) - xi(0));
  CHECK(Ji(0, 0) == doctest::Approx(-cs).epsilon(1e-7));
  CHECK(Jj(0, 0) == doctest::Approx(cs).epsilon(1e-7));
  CHECK(Jj(1, 1) == doctest::Approx(uj(0)).epsilon(1e-7));
  CHECK(Ju(1, 0) == doctest::Approx(xj(1)).epsilon(1e-7));
}

TEST_CASE("coupling graph exposes sending and receiving directions") {
  // 1 <- 2 (f_12 exists), 2 <- 3, 3 <- 1; plus bidirectional 1 <-> 4
  std::vector<uint32_t> ids = {1, 2, 3, 4};
  std::vector<CouplingModel> cs(5);
  cs[0].owner = 1; cs[0].neighbor = 2;
  cs[1].owner = 2; cs[1].neighbor = 3;
  cs[2].owner = 3; cs[2].neighbor = 1;
  cs[3].owner = 1; cs[3].neighbor = 4;
  cs[4].owner = 4; cs[4].neighbor = 1;
  CouplingGraph g(ids, cs);

  CHECK(g.sending(1) == std::vector<uint32_t>{2, 4});
  CHECK(g.receiving(1) == std::vector<uint32_t>{3, 4});
  CHECK(g.neighborhood(1) == std::vector<uint32_t>{2, 3, 4});
  CHECK(g.sending(4) == std::vector<uint32_t>{1});
  CHECK(g.receiving(4) == std::vector<uint32_t>{1});

  // duality: j sends to i exactly when i receives from j
  for (uint32_t i : ids)
    for (uint32_t j : g.sending(i)) {
      auto r = g.receiving(j);
      CHECK(std::find(r.begin(), r.end(), i) != r.end());
    }
}

TEST_CASE("validate accepts a well-formed problem") {
  Problem p;
  p.agents = {minimal_agent(1), minimal_agent(2)};
  CouplingModel c;
  c.owner = 1;
  c.neighbor = 2;
  c.f = [](const Vec& xi, const Vec&, const Vec& xj, const Vec&, double) -> Vec {
    return xj - xi;
  };
  attach_fd_jacobians(c);
  p.couplings = {c};
  CHECK(validate(p).empty());
}

TEST_CASE("validate reports structural defects") {
  SUBCASE("duplicate ids") {
    Problem p;
    p.agents = {minimal_agent(1), minimal_agent(1)};
    CHECK(!validate(p).empty());
  }
  SUBCASE("id zero is reserved") {
    Problem p;
    p.agents = {minimal_agent(0)};
    CHECK(!validate(p).empty());
  }
  SUBCASE("missing dynamics") {
    Problem p;
    AgentModel m = minimal_agent(1);
    m.f = nullptr;
    p.agents = {m};
    CHECK(!validate(p).empty());
  }
  SUBCASE("crossed bounds") {
    Problem p;
    AgentModel m = minimal_agent(1);
    m.u_min(0) = 2.0;
    p.agents = {m};
    CHECK(!validate(p).empty());
  }
  SUBCASE("coupling to unknown agent") {
    Problem p;
    p.agents = {minimal_agent(1)};
    CouplingModel c;
    c.owner = 1;
    c.neighbor = 9;
    c.f = [](const Vec& xi, const Vec&, const Vec&, const Vec&, double) { return xi; };
    attach_fd_jacobians(c);
    p.couplings = {c};
    CHECK(!validate(p).empty());
  }
  SUBCASE("self coupling") {
    Problem p;
    p.agents = {minimal_agent(1)};
    CouplingModel c;
    c.owner = 1;
    c.neighbor = 1;
    c.f = [](const Vec& xi, const Vec&, const Vec&, const Vec&, double) { return xi; };
    attach_fd_jacobians(c);
    p.couplings = {c};
    CHECK(!validate(p).empty());
  }
  SUBCASE("dynamics dimension mismatch") {
    Problem p;
    AgentModel m = minimal_agent(1);
    m.f = [](const Vec&, const Vec&, double) { return Vec::Zero(3); };
    p.agents = {m};
    CHECK(!validate(p).empty());
  }
  SUBCASE("bad horizon") {
    Problem p;
    p.agents = {minimal_agent(1)};
    p.N = 1;
    CHECK(!validate(p).empty());
    p.N = 11;
    p.T = 0.0;
    CHECK(!validate(p).empty());
  }
}

TEST_CASE("problem lookups find agents and couplings") {
  Problem p;
  p.agents = {minimal_agent(1), minimal_agent(2), minimal_agent(3)};
  CouplingModel c12, c21, c23;
  c12.owner = 1; c12.neighbor = 2;
  c21.owner = 2; c21.neighbor = 1;
  c23.owner = 2; c23.neighbor = 3;
  for (auto* c : {&c12, &c21, &c23}) {
    c->f = [](const Vec& xi, const Vec&, const Vec&, const Vec&, double) { return xi; };
    attach_fd_jacobians(*c);
  }
  p.couplings = {c12, c21, c23};

  CHECK(p.agent(2).id == 2);
  CHECK(p.find_agent(9) == nullptr);
  CHECK(p.couplings_owned_by(2).size() == 2);
  CHECK(p.couplings_involving(1).size() == 2);
  CHECK(p.couplings_involving(3).size() == 1);
  CHECK_THROWS(p.agent(9));
}
