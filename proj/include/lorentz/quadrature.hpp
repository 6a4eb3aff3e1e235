#pragma once

#include "lorentz/linalg.hpp"

#include <boost/math/special_functions/legendre.hpp>

#include <cmath>
#include <map>
#include <mutex>
#include <vector>

namespace lorentz {

struct QuadratureRule {
  std::vector<double> x;
  std::vector<double> w;
};

/// n-point Gauss-Legendre rule on [-1, 1]. Rules are computed once and cached.
inline const QuadratureRule& gauss_legendre(int n) {
  static std::mutex mu;
  static std::map<int, QuadratureRule> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  QuadratureRule r;
  const auto zeros = boost::math::legendre_p_zeros<double>(n);  // nonnegative zeros, ascending
  auto add = [&](double x) {
    const double dp = boost::math::legendre_p_prime<double>(n, x);
    r.x.push_back(x);
    r.w.push_back(2.0 / ((1.0 - x * x) * dp * dp));
  };
  for (std::size_t i = zeros.size(); i-- > 0;)
    if (zeros[i] != 0.0) add(-zeros[i]);
  for (double z : zeros) add(z);
  return cache.emplace(n, std::move(r)).first->second;
}

/// Integral of f over [a, b] with an n-point Gauss-Legendre rule.
template <class F> double integrate_gl(F&& f, double a, double b, int n) {
  const auto& r = gauss_legendre(n);
  const double h = 0.5 * (b - a), c = 0.5 * (a + b);
  double s = 0.0;
  for (std::size_t i = 0; i < r.x.size(); ++i) s += r.w[i] * f(c + h * r.x[i]);
  return h * s;
}

/// Composite Gauss-Legendre: `panels` equal panels of n points each.
template <class F> double integrate_gl_composite(F&& f, double a, double b, int n, int panels) {
  double s = 0.0;
  const double h = (b - a) / panels;
  for (int k = 0; k < panels; ++k) s += integrate_gl(f, a + k * h, a + (k + 1) * h, n);
  return s;
}

/// Integral of f(u) over the unit sphere S^{d-1}, written in polar coordinates
/// around `axis` with polar angle a in [a_min, pi]. d = 2 uses both sides of the
/// axis; d = 3 uses n_az azimuthal points (trapezoid, exact for trigonometric
/// polynomials of degree < n_az).
template <int D, class F>
double integrate_sphere(F&& f, const Vec<D>& axis, double a_min, int n_polar, int n_az = 64, int panels = 1) {
  const Vec<D> e = any_orthogonal<D>(axis);
  if constexpr (D == 2) {
    auto g = [&](double a) {
      const double c = std::cos(a), s = std::sin(a);
      return f(Vec<D>(c * axis + s * e)) + f(Vec<D>(c * axis - s * e));
    };
    return integrate_gl_composite(g, a_min, pi, n_polar, panels);
  } else {
    static_assert(D == 3);
    const Vec<D> e2 = Vec<D>(axis.cross(e)).normalized();
    auto g = [&](double a) {
      const double c = std::cos(a), s = std::sin(a);
      double acc = 0.0;
      for (int k = 0; k < n_az; ++k) {
        const double b = 2.0 * pi * (k + 0.5) / n_az;
        acc += f(Vec<D>(c * axis + s * (std::cos(b) * e + std::sin(b) * e2)));
      }
      return acc * (2.0 * pi / n_az) * s;
    };
    return integrate_gl_composite(g, a_min, pi, n_polar, panels);
  }
}

}  // namespace lorentz
