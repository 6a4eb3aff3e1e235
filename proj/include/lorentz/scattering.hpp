#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/linalg.hpp"
#include "lorentz/rotation.hpp"

// pchip.hpp calls isnan unqualified
#include <math.h>

#include <boost/math/interpolators/pchip.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lorentz {

/// Spherically symmetric scattering law described by its planar deflection profile:
/// an incoming pair (e1, -cos(phi) e1 + sin(phi) e2) leaves with
/// v+ = -cos(theta1(phi)) e1 + sin(theta1(phi)) e2 and w+ likewise with theta2.
class ScatteringProfile {
 public:
  enum class Kind { Specular, Tabulated, Analytic };

  static ScatteringProfile specular() {
    ScatteringProfile p;
    p.kind_ = Kind::Specular;
    p.theta1_ = [](double phi) { return 2.0 * phi; };
    p.dtheta1_ = [](double) { return 2.0; };
    p.theta2_ = [](double phi) { return phi; };
    p.omega_ = [](double psi) { return 0.5 * psi; };
    p.domega_ = [](double) { return 0.5; };
    p.b_theta_ = 0.0;
    return p;
  }

  /// Profile from closed-form callables; omega is found by safeguarded Newton iteration.
  static ScatteringProfile analytic(std::function<double(double)> theta1, std::function<double(double)> dtheta1,
                                    std::function<double(double)> theta2) {
    ScatteringProfile p;
    p.kind_ = Kind::Analytic;
    p.theta1_ = std::move(theta1);
    p.dtheta1_ = std::move(dtheta1);
    p.theta2_ = std::move(theta2);
    p.finish_numeric_inverse();
    return p;
  }

  /// Profile from samples on phi in [0, pi/2] (or a symmetric grid); oddness fills in phi < 0.
  /// theta1 and theta2 - theta1 are interpolated by monotone piecewise-cubic Hermite interpolation.
  static ScatteringProfile tabulated(const std::vector<double>& phi, const std::vector<double>& th1,
                                     const std::vector<double>& th2) {
    if (phi.size() != th1.size() || phi.size() != th2.size() || phi.size() < 3)
      throw config_error("BadProfileTable", "need at least 3 rows of equal length");
    for (std::size_t i = 1; i < phi.size(); ++i)
      if (!(phi[i] > phi[i - 1])) throw config_error("BadProfileTable", "phi column must be strictly increasing");
    if (phi.back() < 0.5 * pi - 1e-6)
      throw config_error("BadProfileTable", "table must reach phi = pi/2");
    std::vector<double> x, y1, y2;
    const bool has_negative = phi.front() < 0.0;
    if (!has_negative) {
      for (std::size_t i = phi.size(); i-- > 0;) {
        if (phi[i] == 0.0) continue;
        x.push_back(-phi[i]);
        y1.push_back(-th1[i]);
        y2.push_back(-th2[i]);
      }
      if (phi.front() > 0.0) {
        x.push_back(0.0);
        y1.push_back(0.0);
        y2.push_back(0.0);
      }
    }
    for (std::size_t i = 0; i < phi.size(); ++i) {
      if (phi[i] == 0.0 && (std::abs(th1[i]) > 1e-12 || std::abs(th2[i]) > 1e-12))
        throw config_error("BadProfileTable", "theta must vanish at phi = 0");
      x.push_back(phi[i]);
      y1.push_back(th1[i]);
      y2.push_back(th2[i]);
    }
    const double sgn = y1.back() > y1.front() ? 1.0 : -1.0;
    for (std::size_t i = 1; i < y1.size(); ++i)
      if (!(sgn * (y1[i] - y1[i - 1]) > 0.0))
        throw config_error("BadProfileTable", "theta1 must be strictly monotone");
    using Pchip = boost::math::interpolators::pchip<std::vector<double>>;
    auto x1 = x;
    auto x2 = x;
    // theta2 is stored as theta1 plus an interpolated difference; a difference
    // linear in phi (the Liouville case) is then reproduced exactly.
    for (std::size_t i = 0; i < y2.size(); ++i) y2[i] -= y1[i];
    auto i1 = std::make_shared<Pchip>(std::move(x1), std::move(y1));
    auto i2 = std::make_shared<Pchip>(std::move(x2), std::move(y2));
    ScatteringProfile p;
    p.kind_ = Kind::Tabulated;
    p.theta1_ = [i1](double t) { return (*i1)(t); };
    p.dtheta1_ = [i1](double t) { return i1->prime(t); };
    p.theta2_ = [i1, i2](double t) { return (*i1)(t) + (*i2)(t); };
    p.finish_numeric_inverse();
    return p;
  }

  /// Reads a `phi,theta1,theta2` CSV (header line required, '#' comments allowed).
  static ScatteringProfile load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("ProfileFile", "cannot open " + path);
    std::string line;
    bool header = false;
    std::vector<double> a, b, c;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (!header) {
        if (line.rfind("phi,theta1,theta2", 0) != 0) throw config_error("ProfileFile", "bad header in " + path);
        header = true;
        continue;
      }
      std::stringstream ss(line);
      std::string f;
      double vals[3];
      for (double& val : vals) {
        if (!std::getline(ss, f, ',')) throw config_error("ProfileFile", "short row in " + path);
        val = std::stod(f);
      }
      a.push_back(vals[0]);
      b.push_back(vals[1]);
      c.push_back(vals[2]);
    }
    return tabulated(a, b, c);
  }

  Kind kind() const { return kind_; }
  double b_theta() const { return b_theta_; }
  double theta1(double phi) const { return theta1_(phi); }
  double dtheta1(double phi) const { return dtheta1_(phi); }
  double theta2(double phi) const { return theta2_(phi); }

  /// Inverse of theta1, defined on (B - pi, pi - B).
  double omega(double psi) const {
    if (!(std::abs(psi) < pi - b_theta_ + 1e-12))
      throw Error(ErrorKind::Validation, "OutOfRange", "omega argument outside the image of theta1");
    return omega_(psi);
  }
  double domega(double psi) const { return domega_(psi); }

 private:
  void finish_numeric_inverse() {
    const double edge = theta1_(0.5 * pi);
    b_theta_ = std::max(0.0, pi - std::abs(edge));
    auto t1 = theta1_;
    auto d1 = dtheta1_;
    const double sgn = edge > 0 ? 1.0 : -1.0;
    omega_ = [t1, d1, sgn](double psi) {
      double lo = -0.5 * pi, hi = 0.5 * pi;
      const double slope = d1(0.0);
      double x = slope != 0.0 ? std::clamp(psi / slope, lo, hi) : 0.0;
      for (int it = 0; it < 200; ++it) {
        const double f = sgn * (t1(x) - psi);
        if (f > 0) hi = x; else lo = x;
        const double df = sgn * d1(x);
        double nx = df > 0 ? x - f / df : 0.5 * (lo + hi);
        if (!(nx > lo && nx < hi)) nx = 0.5 * (lo + hi);
        if (std::abs(nx - x) <= 1e-15 * (1.0 + std::abs(x)) || hi - lo < 1e-15) return nx;
        x = nx;
      }
      return x;
    };
    auto om = omega_;
    domega_ = [om, d1](double psi) { return 1.0 / d1(om(psi)); };
  }

  Kind kind_ = Kind::Specular;
  std::function<double(double)> theta1_, dtheta1_, theta2_, omega_, domega_;
  double b_theta_ = 0.0;
};

template <int D> struct ScatterResult {
  Vec<D> v_plus;
  Vec<D> w_plus;
};

namespace detail {

// Unit vector e in span{v, x} orthogonal to v, oriented towards x.
template <int D> Vec<D> plane_direction(const Vec<D>& v, const Vec<D>& x) {
  Vec<D> e = x - x.dot(v) * v;
  const double n = e.norm();
  if (n < 1e-300) return any_orthogonal<D>(v);
  return e / n;
}

}  // namespace detail

/// Theta(v, w) for an incoming pair (v . w < 0).
template <int D> ScatterResult<D> theta(const ScatteringProfile& prof, const Vec<D>& v, const Vec<D>& w) {
  const double vw = v.dot(w);
  if (!(vw < 0.0)) throw Error(ErrorKind::Validation, "NotIncoming", "theta needs v . w < 0");
  if (prof.kind() == ScatteringProfile::Kind::Specular) return {(v - 2.0 * vw * w).normalized(), w};
  const Vec<D> e = detail::plane_direction<D>(v, w);
  const double phi = std::atan2(w.dot(e), -vw);
  const double t1 = prof.theta1(phi), t2 = prof.theta2(phi);
  return {(-std::cos(t1) * v + std::sin(t1) * e).normalized(), (-std::cos(t2) * v + std::sin(t2) * e).normalized()};
}

/// Inverse impact map beta^-_v(u): the sphere point w with Theta_1(v, w) = u;
/// nullopt if u lies outside V_v.
template <int D>
std::optional<Vec<D>> beta_minus(const ScatteringProfile& prof, const Vec<D>& v, const Vec<D>& u) {
  const double a = angle_between(v, u);
  if (!(a > prof.b_theta() + 1e-9)) return std::nullopt;
  const double phi = prof.omega(pi - a);
  const Vec<D> e = detail::plane_direction<D>(v, u);
  return (-std::cos(phi) * v + std::sin(phi) * e).normalized();
}

/// Exit point beta^+_v(u) = Theta_2(v, beta^-_v(u)).
template <int D>
std::optional<Vec<D>> beta_plus(const ScatteringProfile& prof, const Vec<D>& v, const Vec<D>& u) {
  const double a = angle_between(v, u);
  if (!(a > prof.b_theta() + 1e-9)) return std::nullopt;
  const double phi = prof.omega(pi - a);
  const Vec<D> e = detail::plane_direction<D>(v, u);
  const double t2 = prof.theta2(phi);
  return (-std::cos(t2) * v + std::sin(t2) * e).normalized();
}

/// J(v0, v1): density of the exit direction v1 per unit impact-parameter area.
template <int D> double jacobian_j(const ScatteringProfile& prof, const Vec<D>& v0, const Vec<D>& v1) {
  const double a = angle_between(v0, v1);
  if (!(a > prof.b_theta())) return 0.0;
  const double psi = pi - a;
  if (psi < 1e-9) return std::pow(std::abs(prof.domega(0.0)), D - 1);
  const double om = prof.omega(psi);
  const double ratio = D == 2 ? 1.0 : std::pow(std::abs(std::sin(om) / std::sin(psi)), D - 2);
  return ratio * std::abs(prof.domega(psi)) * std::cos(om);
}

/// True if theta2 = theta1 - phi or theta2 = theta1 + phi on a grid of interior points.
inline bool liouville_preserving(const ScatteringProfile& prof, int grid_size) {
  double dm = 0.0, dp = 0.0;
  for (int i = 0; i < grid_size; ++i) {
    const double phi = -0.5 * pi + pi * (i + 0.5) / grid_size;
    const double t1 = prof.theta1(phi), t2 = prof.theta2(phi);
    dm = std::max(dm, std::abs(t2 - (t1 - phi)));
    dp = std::max(dp, std::abs(t2 - (t1 + phi)));
  }
  return dm <= 1e-8 || dp <= 1e-8;
}

/// Exit direction for impact parameter w (|w| < 1) when the incoming velocity is e1.
template <int D> Vec<D> exit_direction_e1(const ScatteringProfile& prof, const Perp<D>& w) {
  const Vec<D> hit = -lift_hemisphere<D>(w);
  return theta<D>(prof, basis_vector<D>(0), hit).v_plus;
}

/// Impact parameter w = -beta^-_{e1}(u K(v))_perp of the collision turning v into u.
template <int D>
std::optional<Perp<D>> impact_parameter(const ScatteringProfile& prof, const Vec<D>& v, const Vec<D>& u) {
  const Mat<D> K = rotation_to_e1<D>(v);
  const auto b = beta_minus<D>(prof, basis_vector<D>(0), Vec<D>(u * K));
  if (!b) return std::nullopt;
  return Perp<D>(-perp<D>(*b));
}

/// Exit offset z = (beta^+_{v0}(v1) K(v1))_perp.
template <int D>
std::optional<Perp<D>> exit_offset(const ScatteringProfile& prof, const Vec<D>& v0, const Vec<D>& v1) {
  const auto b = beta_plus<D>(prof, v0, v1);
  if (!b) return std::nullopt;
  return Perp<D>(perp<D>(Vec<D>(*b * rotation_to_e1<D>(v1))));
}

}  // namespace lorentz
