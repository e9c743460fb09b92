#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

namespace dmpc {

/// Piecewise-linear signal on a uniform time grid over [0, T].
/// Row k holds the sample at t_k = k * T / (N - 1).
class Trajectory {
public:
  Trajectory() = default;
  Trajectory(double T, int N, int dim);
  Trajectory(double T, Eigen::MatrixXd values);

  double horizon() const { return T_; }
  int size() const { return static_cast<int>(vals_.rows()); }
  int dim() const { return static_cast<int>(vals_.cols()); }
  double dt() const { return T_ / (size() - 1); }
  double time(int k) const { return k * dt(); }

  double& operator()(int k, int c) { return vals_(k, c); }
  double operator()(int k, int c) const { return vals_(k, c); }
  Eigen::MatrixXd& values() { return vals_; }
  const Eigen::MatrixXd& values() const { return vals_; }
  Eigen::VectorXd at(int k) const { return vals_.row(k).transpose(); }
  void set(int k, const Eigen::VectorXd& v) { vals_.row(k) = v.transpose(); }

  /// Linear interpolation, clamped to [0, T].
  Eigen::VectorXd lerp(double t) const;

  /// Re-sample from t + delta onward; the tail past T holds the last sample.
  Trajectory shifted(double delta) const;

  /// Trapezoid quadrature weight of grid point k (dt/2 at the ends).
  double quad_weight(int k) const;

  void set_constant(const Eigen::VectorXd& v);
  void set_zero() { vals_.setZero(); }

  /// Columns [start, start+count) as their own trajectory.
  Trajectory columns(int start, int count) const;

  bool same_grid(const Trajectory& o) const;

private:
  double T_ = 0.0;
  Eigen::MatrixXd vals_;
};

/// Trapezoid integral of a scalar signal (dim must be 1).
double trapezoid(const Trajectory& s);

/// Pointwise x(t)^T diag(w) x(t) as a scalar trajectory.
Trajectory weighted_sq_norm(const Trajectory& x, const Eigen::VectorXd& w);

/// Discrete L2 norm of stacked differences: sqrt(sum_k w_k sum_c (a-b)^2)
/// with trapezoid weights w_k, accumulated over all pairs.
double stacked_diff_norm(
    const std::vector<std::pair<const Trajectory*, const Trajectory*>>& pairs);

/// Supremum-in-time of the stacked euclidean norm of the differences.
double stacked_diff_sup(
    const std::vector<std::pair<const Trajectory*, const Trajectory*>>& pairs);

/// CSV with header "t,<name>_0,..." and 17-significant-digit floats.
void write_csv(const std::string& path,
               const std::vector<std::pair<std::string, const Trajectory*>>& signals);

}  // namespace dmpc
