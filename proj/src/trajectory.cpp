#include "dmpc/trajectory.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dmpc {

Trajectory::Trajectory(double T, int N, int dim) : T_(T) {
  if (N < 2) throw std::invalid_argument("trajectory needs at least 2 grid points");
  if (T <= 0.0) throw std::invalid_argument("trajectory horizon must be positive");
  if (dim < 0) throw std::invalid_argument("trajectory dim must be non-negative");
  vals_ = Eigen::MatrixXd::Zero(N, dim);
}

Trajectory::Trajectory(double T, Eigen::MatrixXd values) : T_(T), vals_(std::move(values)) {
  if (vals_.rows() < 2) throw std::invalid_argument("trajectory needs at least 2 grid points");
  if (T <= 0.0) throw std::invalid_argument("trajectory horizon must be positive");
}

Eigen::VectorXd Trajectory::lerp(double t) const {
  if (t <= 0.0) return vals_.row(0).transpose();
  if (t >= T_) return vals_.row(size() - 1).transpose();
  const double h = dt();
  const double s = t / h;
  int k = static_cast<int>(s);
  if (k >= size() - 1) k = size() - 2;
  const double a = s - k;
  return ((1.0 - a) * vals_.row(k) + a * vals_.row(k + 1)).transpose();
}

Trajectory Trajectory::shifted(double delta) const {
  Trajectory out(T_, size(), dim());
  for (int k = 0; k < size(); ++k) out.set(k, lerp(time(k) + delta));
  return out;
}

double Trajectory::quad_weight(int k) const {
  const double h = dt();
  return (k == 0 || k == size() - 1) ? 0.5 * h : h;
}

void Trajectory::set_constant(const Eigen::VectorXd& v) {
  if (v.size() != dim()) throw std::invalid_argument("set_constant: dim mismatch");
  for (int k = 0; k < size(); ++k) vals_.row(k) = v.transpose();
}

Trajectory Trajectory::columns(int start, int count) const {
  if (start < 0 || count < 0 || start + count > dim())
    throw std::out_of_range("trajectory column slice out of range");
  return Trajectory(T_, vals_.middleCols(start, count));
}

bool Trajectory::same_grid(const Trajectory& o) const {
  return size() == o.size() && T_ == o.horizon();
}

double trapezoid(const Trajectory& s) {
  if (s.dim() != 1) throw std::invalid_argument("trapezoid expects a scalar trajectory");
  double acc = 0.0;
  for (int k = 0; k < s.size(); ++k) acc += s.quad_weight(k) * s(k, 0);
  return acc;
}

Trajectory weighted_sq_norm(const Trajectory& x, const Eigen::VectorXd& w) {
  if (w.size() != x.dim()) throw std::invalid_argument("weighted_sq_norm: weight dim mismatch");
  Trajectory out(x.horizon(), x.size(), 1);
  for (int k = 0; k < x.size(); ++k) {
    double acc = 0.0;
    for (int c = 0; c < x.dim(); ++c) acc += w(c) * x(k, c) * x(k, c);
    out(k, 0) = acc;
  }
  return out;
}

double stacked_diff_norm(
    const std::vector<std::pair<const Trajectory*, const Trajectory*>>& pairs) {
  double acc = 0.0;
  for (const auto& [a, b] : pairs) {
    if (!a->same_grid(*b) || a->dim() != b->dim())
      throw std::invalid_argument("stacked_diff_norm: grid/dim mismatch");
    for (int k = 0; k < a->size(); ++k) {
      double row = 0.0;
      for (int c = 0; c < a->dim(); ++c) {
        const double d = (*a)(k, c) - (*b)(k, c);
        row += d * d;
      }
      acc += a->quad_weight(k) * row;
    }
  }
  return std::sqrt(acc);
}

double stacked_diff_sup(
    const std::vector<std::pair<const Trajectory*, const Trajectory*>>& pairs) {
  if (pairs.empty()) return 0.0;
  const int N = pairs.front().first->size();
  double best = 0.0;
  for (int k = 0; k < N; ++k) {
    double row = 0.0;
    for (const auto& [a, b] : pairs) {
      if (!a->same_grid(*b) || a->dim() != b->dim() || a->size() != N)
        throw std::invalid_argument("stacked_diff_sup: grid/dim mismatch");
      for (int c = 0; c < a->dim(); ++c) {
        const double d = (*a)(k, c) - (*b)(k, c);
        row += d * d;
      }
    }
    best = std::max(best, std::sqrt(row));
  }
  return best;
}

void write_csv(const std::string& path,
               const std::vector<std::pair<std::string, const Trajectory*>>& signals) {
  if (signals.empty()) throw std::invalid_argument("write_csv: no signals");
  const Trajectory* first = signals.front().second;
  for (const auto& [name, tr] : signals)
    if (!tr->same_grid(*first)) throw std::invalid_argument("write_csv: grid mismatch");

  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  out << "t";
  for (const auto& [name, tr] : signals)
    for (int c = 0; c < tr->dim(); ++c) out << "," << name << "_" << c;
  out << "\n";
  char buf[40];
  for (int k = 0; k < first->size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", first->time(k));
    out << buf;
    for (const auto& [name, tr] : signals)
      for (int c = 0; c < tr->dim(); ++c) {
        std::snprintf(buf, sizeof(buf), "%.17g", (*tr)(k, c));
        out << "," << buf;
      }
    out << "\n";
  }
}

}  // namespace dmpc
