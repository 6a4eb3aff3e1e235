#pragma once

#include "lorentz/linalg.hpp"

#include <cmath>

namespace lorentz {

/// E(w) = exp([[0, w], [-w^T, 0]]) for w in R^{d-1}, in closed form.
template <int D> Mat<D> exp_skew(const Perp<D>& w) {
  Mat<D> E = Mat<D>::Identity();
  const double th = w.norm();
  if (th == 0.0) return E;
  const Perp<D> n = w / th;
  const double c = std::cos(th), s = std::sin(th);
  E(0, 0) = c;
  E.block(0, 1, 1, D - 1) = s * n;
  E.block(1, 0, D - 1, 1) = -s * n.transpose();
  E.block(1, 1, D - 1, D - 1) -= (1.0 - c) * (n.transpose() * n);
  return E;
}

/// Rotation K(v) in SO(d) with v K(v) = e1.
/// Away from -e1 this is E(-(2 arcsin(|v - e1|/2) / |v_perp|) v_perp); within 1e-6 of -e1
/// we first apply the half-turn in the (e1, e2)-plane and then the same formula.
template <int D> Mat<D> rotation_to_e1(const Vec<D>& v) {
  Vec<D> e1 = basis_vector<D>(0);
  if (angle_between(v, -e1) < 1e-6) {
    Mat<D> R = Mat<D>::Identity();
    R(0, 0) = -1.0;
    R(1, 1) = -1.0;
    return R * rotation_to_e1<D>(v * R);
  }
  const Perp<D> vp = perp<D>(v);
  const double r = vp.norm();
  if (r == 0.0) return Mat<D>::Identity();
  const double ang = 2.0 * std::asin(std::min(1.0, 0.5 * (v - e1).norm()));
  return exp_skew<D>(Perp<D>(-(ang / r) * vp));
}

}  // namespace lorentz
