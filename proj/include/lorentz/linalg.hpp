#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

namespace lorentz {

// Row vectors throughout, so that vK is a plain product.
template <int D> using Vec = Eigen::Matrix<double, 1, D>;
template <int D> using Mat = Eigen::Matrix<double, D, D>;
template <int D> using IVec = Eigen::Matrix<long long, 1, D>;
template <int D> using Perp = Eigen::Matrix<double, 1, D - 1>;

inline constexpr double pi = std::numbers::pi;

template <int D> Vec<D> basis_vector(int i) {
  Vec<D> e = Vec<D>::Zero();
  e[i] = 1.0;
  return e;
}

/// Angle in [0, pi] between two nonzero vectors (Kahan's formula, accurate at both ends).
template <class A, class B> double angle_between(const A& a, const B& b) {
  const double na = a.norm();
  const double nb = b.norm();
  const auto x = (a * nb).eval();
  const auto y = (b * na).eval();
  return 2.0 * std::atan2((x - y).norm(), (x + y).norm());
}

/// x_perp: the last d-1 coordinates.
template <int D> Perp<D> perp(const Vec<D>& x) { return x.template tail<D - 1>(); }

/// Inverse of perp on the e1-side hemisphere: (sqrt(1-|w|^2), w).
template <int D> Vec<D> lift_hemisphere(const Perp<D>& w) {
  Vec<D> x;
  x[0] = std::sqrt(std::max(0.0, 1.0 - w.squaredNorm()));
  x.template tail<D - 1>() = w;
  return x;
}

/// Some unit vector orthogonal to a unit vector v.
template <int D> Vec<D> any_orthogonal(const Vec<D>& v) {
  int k = 0;
  for (int i = 1; i < D; ++i)
    if (std::abs(v[i]) < std::abs(v[k])) k = i;
  Vec<D> e = basis_vector<D>(k);
  e -= e.dot(v) * v;
  return e.normalized();
}

/// Volume of the unit ball in R^n.
inline double unit_ball_volume(int n) {
  return std::pow(pi, 0.5 * n) / std::tgamma(0.5 * n + 1.0);
}

/// Surface area of the unit sphere S^{n-1} in R^n.
inline double unit_sphere_area(int n) { return n * unit_ball_volume(n); }

}  // namespace lorentz
