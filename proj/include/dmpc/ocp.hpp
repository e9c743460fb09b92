#pragma once

#include <Eigen/Dense>
#include <functional>

namespace dmpc {

/// A continuous-time OCP on [0, T], discretized on a uniform grid:
///   min  V(x(T), u(T)) + int l(x, u, t) dt
///   s.t. x' = f(x, u, t), x(0) = x0,
///        g(x, u, t) = 0, h(x, u, t) <= 0, u in [u_min, u_max].
/// The decision vector u may stack controls and local copies; the terminal
/// cost may read u(T) so copy trajectories can carry terminal penalties.
struct OcpInstance {
  int nx = 0;
  int nu = 0;
  double T = 1.0;
  int N = 11;
  Eigen::VectorXd x0;
  Eigen::VectorXd u_min, u_max;  // +-inf where unbounded

  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> f;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dfdx;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dfdu;

  std::function<double(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> l;
  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dldx;
  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dldu;

  std::function<double(const Eigen::VectorXd& xT, const Eigen::VectorXd& uT)> V;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& xT, const Eigen::VectorXd& uT)> dVdx;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& xT, const Eigen::VectorXd& uT)> dVdu;

  int ng = 0;
  int nh = 0;
  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> g;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dgdx;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dgdu;
  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> h;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dhdx;
  std::function<Eigen::MatrixXd(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& u)> dhdu;
};

}  // namespace dmpc
