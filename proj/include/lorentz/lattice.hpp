#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <vector>

namespace lorentz {

template <int D> struct Lattice {
  Mat<D> basis;          // rows are the generators; points are m * basis
  Mat<D> inverse_basis;
  double covering_radius = 0.0;
  double shortest_vector = 0.0;
  // axis_pad[i] bounds |(x M0^{-1})_i| for a unit vector x; it converts a
  // Euclidean slack into a slack on lattice coordinates.
  Vec<D> axis_pad;

  Vec<D> point(const IVec<D>& m) const { return m.template cast<double>() * basis; }
};

template <int D> struct Ray {
  Vec<D> q;
  Vec<D> v;
};

template <int D> struct HitRecord {
  double tau = 0.0;
  IVec<D> m;
  Vec<D> w;
};

namespace detail {

// Calls fn(k) for every integer vector with lo <= k <= hi componentwise.
template <int D, class Fn> void for_each_in_box(const IVec<D>& lo, const IVec<D>& hi, Fn&& fn) {
  IVec<D> k = lo;
  while (true) {
    fn(k);
    int i = 0;
    for (; i < D; ++i) {
      if (k[i] < hi[i]) {
        ++k[i];
        break;
      }
      k[i] = lo[i];
    }
    if (i == D) return;
  }
}

template <int D> IVec<D> box_bound(const Vec<D>& pad, double radius) {
  IVec<D> b;
  for (int i = 0; i < D; ++i) b[i] = static_cast<long long>(std::ceil(radius * pad[i] - 1e-12));
  return b;
}

template <int D> double compute_shortest_vector(const Lattice<D>& lat) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < D; ++i) best = std::min(best, lat.basis.row(i).norm());
  const IVec<D> b = box_bound<D>(lat.axis_pad, best);
  for_each_in_box<D>(-b, b, [&](const IVec<D>& k) {
    if (k.isZero()) return;
    best = std::min(best, lat.point(k).norm());
  });
  return best;
}

// Covering radius = circumradius of the Voronoi cell of the origin. Every
// Voronoi-relevant vector has length <= 2 * covering radius <= sqrt(sum |b_i|^2),
// so the cell is cut out by the short vectors collected below; its vertices
// solve D of the bisector equations.
template <int D> double compute_covering_radius(const Lattice<D>& lat) {
  const double bound = std::sqrt(lat.basis.rowwise().squaredNorm().sum());
  std::vector<Vec<D>> rel;
  const IVec<D> b = box_bound<D>(lat.axis_pad, bound);
  for_each_in_box<D>(-b, b, [&](const IVec<D>& k) {
    if (k.isZero()) return;
    const Vec<D> r = lat.point(k);
    if (r.norm() <= bound * (1 + 1e-12)) rel.push_back(r);
  });
  // Keep only facet vectors: r is dropped when some s != 0, r has s.r >= |s|^2,
  // i.e. the midpoint r/2 is not strictly closer to 0 than to s.
  {
    std::vector<Vec<D>> facets;
    for (const auto& r : rel) {
      const double tol = 1e-12 * r.squaredNorm();
      bool keep = true;
      for (const auto& t : rel) {
        if ((t - r).squaredNorm() <= tol) continue;
        if (t.dot(r) >= t.squaredNorm() - tol) {
          keep = false;
          break;
        }
      }
      if (keep) facets.push_back(r);
    }
    rel.swap(facets);
  }
  const int n = static_cast<int>(rel.size());
  double best = 0.0;
  std::array<int, D> idx{};
  for (int i = 0; i < D; ++i) idx[i] = i;
  while (true) {
    Mat<D> A;
    Eigen::Matrix<double, D, 1> rhs;
    for (int i = 0; i < D; ++i) {
      A.row(i) = rel[idx[i]];
      rhs[i] = 0.5 * rel[idx[i]].squaredNorm();
    }
    Eigen::FullPivLU<Mat<D>> lu(A);
    if (lu.isInvertible()) {
      const Vec<D> x = lu.solve(rhs).transpose();
      const double x2 = x.squaredNorm();
      bool inside = true;
      for (const auto& r : rel) {
        if (x.dot(r) > 0.5 * r.squaredNorm() + 1e-9 * (1 + x2)) {
          inside = false;
          break;
        }
      }
      if (inside) best = std::max(best, std::sqrt(x2));
    }
    int i = D - 1;
    while (i >= 0 && idx[i] == n - D + i) --i;
    if (i < 0) break;
    ++idx[i];
    for (int j = i + 1; j < D; ++j) idx[j] = idx[j - 1] + 1;
  }
  return best;
}

}  // namespace detail

/// Builds the lattice Z^d M0. A basis whose |det| is within 1e-6 of one is
/// rescaled to covolume exactly one; larger deviations need allow_rescale.
template <int D> Lattice<D> build_lattice(const Mat<D>& basis, bool allow_rescale = false) {
  static_assert(D >= 2);
  const double det = basis.determinant();
  const double scale_ref = std::pow(basis.rowwise().norm().prod(), 1.0 / D);
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * std::pow(scale_ref, D))
    throw config_error("SingularBasis", "lattice basis is singular");
  if (std::abs(std::abs(det) - 1.0) > 1e-6 && !allow_rescale)
    throw config_error("BadCovolume", "|det M0| = " + std::to_string(std::abs(det)) + " is not 1");
  Lattice<D> lat;
  lat.basis = basis / std::pow(std::abs(det), 1.0 / D);
  lat.inverse_basis = lat.basis.inverse();
  for (int i = 0; i < D; ++i) lat.axis_pad[i] = lat.inverse_basis.col(i).norm();
  lat.shortest_vector = detail::compute_shortest_vector(lat);
  lat.covering_radius = detail::compute_covering_radius(lat);
  return lat;
}

namespace detail {

// Distance-safe ray/ball test. Returns the entry time or a negative number.
template <int D>
double ball_entry(const Vec<D>& q, const Vec<D>& v, const Vec<D>& c, double rho2) {
  const Vec<D> delta = c - q;
  const double tc = v.dot(delta);
  if (tc <= 0.0) return -1.0;
  const double disc = rho2 - (delta - tc * v).squaredNorm();
  if (disc <= 0.0) return -1.0;  // misses, or grazes: tangential contact is not a hit
  return std::max(0.0, tc - std::sqrt(disc));
}

// Walks the unit cells of Z^d pierced by x(t) = q M0^{-1} + t v M0^{-1} in order of t.
// Any point within rho of a lattice point m lies in a cell c with
// c_i - pad_i <= m_i <= c_i + 1 + pad_i, where pad_i = rho * axis_pad[i].
// visit(cell, t_enter, t_exit) returns false to stop the walk.
template <int D, class Visit>
void walk_cells(const Lattice<D>& lat, const Vec<D>& q, const Vec<D>& v, double t_stop, Visit&& visit) {
  const Vec<D> x0 = q * lat.inverse_basis;
  const Vec<D> u = v * lat.inverse_basis;
  IVec<D> cell;
  Vec<D> t_next, t_delta;
  IVec<D> step;
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < D; ++i) {
    cell[i] = static_cast<long long>(std::floor(x0[i]));
    if (u[i] > 0) {
      step[i] = 1;
      t_delta[i] = 1.0 / u[i];
      t_next[i] = (static_cast<double>(cell[i]) + 1.0 - x0[i]) / u[i];
    } else if (u[i] < 0) {
      step[i] = -1;
      t_delta[i] = -1.0 / u[i];
      t_next[i] = (static_cast<double>(cell[i]) - x0[i]) / u[i];
    } else {
      step[i] = 0;
      t_delta[i] = inf;
      t_next[i] = inf;
    }
  }
  double t_enter = 0.0;
  while (t_enter <= t_stop) {
    int axis = 0;
    for (int i = 1; i < D; ++i)
      if (t_next[i] < t_next[axis]) axis = i;
    const double t_exit = t_next[axis];
    if (!visit(cell, t_enter, t_exit)) return;
    t_enter = t_exit;
    cell[axis] += step[axis];
    t_next[axis] += t_delta[axis];
  }
}

template <int D> void cell_candidate_box(const Lattice<D>& lat, const IVec<D>& cell, double rho, IVec<D>& lo, IVec<D>& hi) {
  for (int i = 0; i < D; ++i) {
    const double pad = rho * lat.axis_pad[i] + 1e-9;
    lo[i] = static_cast<long long>(std::ceil(static_cast<double>(cell[i]) - pad));
    hi[i] = static_cast<long long>(std::floor(static_cast<double>(cell[i]) + 1.0 + pad));
  }
}

}  // namespace detail

/// True if q lies strictly inside some ball (a relative slack of 1e-10 absorbs roundoff
/// for points placed on a sphere).
template <int D> bool inside_some_ball(const Lattice<D>& lat, const Vec<D>& q, double rho) {
  const Vec<D> x = q * lat.inverse_basis;
  IVec<D> cell, lo, hi;
  for (int i = 0; i < D; ++i) cell[i] = static_cast<long long>(std::floor(x[i]));
  detail::cell_candidate_box(lat, cell, rho, lo, hi);
  bool inside = false;
  const double lim = rho * rho * (1.0 - 1e-10);
  detail::for_each_in_box<D>(lo, hi, [&](const IVec<D>& m) {
    if ((lat.point(m) - q).squaredNorm() < lim) inside = true;
  });
  return inside;
}

/// First ball of radius rho hit by the ray within flight time t_max.
template <int D>
std::optional<HitRecord<D>> free_path(const Lattice<D>& lat, const Ray<D>& ray, double rho, double t_max) {
  if (inside_some_ball(lat, ray.q, rho))
    throw Error(ErrorKind::Validation, "OriginInsideBall", "ray origin lies inside a scatterer");
  const double rho2 = rho * rho;
  double best = std::numeric_limits<double>::infinity();
  IVec<D> best_m = IVec<D>::Zero();
  IVec<D> lo, hi;
  detail::walk_cells<D>(lat, ray.q, ray.v, t_max, [&](const IVec<D>& cell, double, double t_exit) {
    detail::cell_candidate_box(lat, cell, rho, lo, hi);
    detail::for_each_in_box<D>(lo, hi, [&](const IVec<D>& m) {
      const double t = detail::ball_entry<D>(ray.q, ray.v, lat.point(m), rho2);
      if (t >= 0.0 && t < best) {
        best = t;
        best_m = m;
      }
    });
    // An entry point at time t lies in the cell visited at time t, so once the
    // walk has passed the best entry time nothing earlier can appear.
    return !(best <= t_exit);
  });
  if (!(best <= t_max)) return std::nullopt;
  HitRecord<D> hit;
  hit.tau = best;
  hit.m = best_m;
  hit.w = ((ray.q + best * ray.v - lat.point(best_m)) / rho).normalized();
  return hit;
}

/// Lattice indices examined by free_path along the segment q + [0, t] v.
template <int D>
std::vector<IVec<D>> enumerate_candidates(const Lattice<D>& lat, const Vec<D>& q, const Vec<D>& v, double t, double rho) {
  auto less = [](const IVec<D>& a, const IVec<D>& b) {
    return std::lexicographical_compare(a.data(), a.data() + D, b.data(), b.data() + D);
  };
  std::set<IVec<D>, decltype(less)> out(less);
  IVec<D> lo, hi;
  detail::walk_cells<D>(lat, q, v, t, [&](const IVec<D>& cell, double, double) {
    detail::cell_candidate_box(lat, cell, rho, lo, hi);
    detail::for_each_in_box<D>(lo, hi, [&](const IVec<D>& m) { out.insert(m); });
    return true;
  });
  return {out.begin(), out.end()};
}

}  // namespace lorentz
