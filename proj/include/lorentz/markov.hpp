#pragma once

#include "lorentz/directions.hpp"
#include "lorentz/kernels.hpp"
#include "lorentz/microsim.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace lorentz {

/// Path of the limiting process: Q0 and the segments S_k = lens[k] dirs[k], with
/// partial sums T_k = |S_1| + ... + |S_k| (T_0 = 0). Directions are kept as drawn so
/// couplings with X-hat are exact.
template <int D> struct SegmentChain {
  Vec<D> Q0 = Vec<D>::Zero();
  std::vector<Vec<D>> dirs;
  std::vector<double> lens;
  std::vector<double> T;

  std::size_t size() const { return dirs.size(); }
  Vec<D> segment(std::size_t j) const { return lens[j] * dirs[j]; }
  std::vector<Vec<D>> segments() const {
    std::vector<Vec<D>> out;
    for (std::size_t j = 0; j < size(); ++j) out.push_back(segment(j));
    return out;
  }
  double horizon() const { return T.empty() ? 0.0 : T.back(); }
  void push(const Vec<D>& dir, double len) {
    dirs.push_back(dir);
    lens.push_back(len);
    T.push_back(horizon() + len);
  }
};

/// Initial law on T^1(R^d): Q Gaussian around `mean` (a point mass when sigma = 0),
/// V independent with density lambda.
template <int D> struct PhaseLaw {
  Vec<D> mean = Vec<D>::Zero();
  double sigma = 0.0;
  DirectionDensity<D> lambda = DirectionDensity<D>::uniform();

  /// Draws Q, then V.
  std::pair<Vec<D>, Vec<D>> sample(Rng& rng) const {
    Vec<D> q = mean;
    if (sigma > 0.0)
      for (int i = 0; i < D; ++i) q[i] += sigma * rng.normal();
    return {q, lambda.sample(rng)};
  }

  /// Density in (Q, V) for sigma > 0.
  double density(const Vec<D>& q, const Vec<D>& v) const {
    const double r2 = (q - mean).squaredNorm() / (sigma * sigma);
    return std::exp(-0.5 * r2) / std::pow(2.0 * pi * sigma * sigma, 0.5 * D) * lambda(v);
  }
};

namespace detail {

inline void require_mass(double m) {
  if (!(m >= 1e-12)) throw Error(ErrorKind::Validation, "DegenerateKernel", "direction marginal below 1e-12");
}

// Direction after a collision with incoming velocity v and impact parameter w.
template <int D> Vec<D> exit_direction(const ScatteringProfile& prof, const Vec<D>& v, const Perp<D>& w) {
  return exit_direction_e1<D>(prof, w) * rotation_to_e1<D>(v).transpose();
}

}  // namespace detail

namespace detail {

template <int D>
std::pair<Vec<D>, double> draw_second(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& v,
                                      double xi, Rng& rng) {
  require_mass(k.marginal(Source::Generic, xi, Perp<D>::Zero()));
  const Perp<D> w = k.sample_w(Source::Generic, xi, Perp<D>::Zero(), rng);
  const Vec<D> u = exit_direction<D>(prof, v, w);
  const auto z = exit_offset<D>(prof, v, u);
  if (!z) throw Error(ErrorKind::Validation, "DegenerateKernel", "sampled direction outside the scattering image");
  return {u, k.sample_xi(Source::Lattice, *z, rng)};
}

template <int D>
std::pair<Vec<D>, double> draw_next(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& v0,
                                    const Vec<D>& v1, double xi, Rng& rng) {
  const auto z12 = exit_offset<D>(prof, v0, v1);
  if (!z12) throw Error(ErrorKind::Validation, "DegenerateKernel", "segment pair is not admissible");
  require_mass(k.marginal(Source::Lattice, xi, *z12));
  const Perp<D> w = k.sample_w(Source::Lattice, xi, *z12, rng);
  const Vec<D> u = exit_direction<D>(prof, v1, w);
  const auto z23 = exit_offset<D>(prof, v1, u);
  if (!z23) throw Error(ErrorKind::Validation, "DegenerateKernel", "sampled direction outside the scattering image");
  return {u, k.sample_xi(Source::Lattice, *z23, rng)};
}

}  // namespace detail

/// S_1: direction from lambda, then the length from the xi-marginal of the generic kernel.
template <int D>
Vec<D> sample_first(const DirectionDensity<D>& lambda, const KernelBackend<D>& k, Rng& rng) {
  const Vec<D> dir = lambda.sample(rng);
  return k.sample_xi(Source::Generic, Perp<D>::Zero(), rng) * dir;
}

/// S_2 given S_1: the direction has density p(S1^, |S1|, .) / marginal; the length
/// has density I(S1, S2) in |S2|.
template <int D>
Vec<D> sample_second(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& S1, Rng& rng) {
  const double xi = S1.norm();
  const auto [u, len] = detail::draw_second<D>(prof, k, Vec<D>(S1 / xi), xi, rng);
  return len * u;
}

/// S_{n+1} with density Psi(S_{n-1}, S_n, .): direction first (w drawn from
/// Phi_0(|S_n|, ., z) and mapped through the scattering map), then the length.
template <int D>
Vec<D> sample_next(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& S_prev2,
                   const Vec<D>& S_prev1, Rng& rng) {
  const double xi = S_prev1.norm();
  const auto [u, len] = detail::draw_next<D>(prof, k, Vec<D>(S_prev2.normalized()), Vec<D>(S_prev1 / xi), xi, rng);
  return len * u;
}

/// Appends segments until the chain has n segments.
template <int D>
void extend_to_count(SegmentChain<D>& c, const DirectionDensity<D>& lambda, const ScatteringProfile& prof,
                     const KernelBackend<D>& k, std::size_t n, Rng& rng) {
  while (c.size() < n) {
    const std::size_t m = c.size();
    if (m == 0) {
      const Vec<D> dir = lambda.sample(rng);
      c.push(dir, k.sample_xi(Source::Generic, Perp<D>::Zero(), rng));
    } else if (m == 1) {
      const auto [u, len] = detail::draw_second<D>(prof, k, c.dirs[0], c.lens[0], rng);
      c.push(u, len);
    } else {
      const auto [u, len] = detail::draw_next<D>(prof, k, c.dirs[m - 2], c.dirs[m - 1], c.lens[m - 1], rng);
      c.push(u, len);
    }
  }
}

/// Appends segments until T_last > t (at most max_segments).
template <int D>
void extend_past(SegmentChain<D>& c, const DirectionDensity<D>& lambda, const ScatteringProfile& prof,
                 const KernelBackend<D>& k, double t, Rng& rng, std::size_t max_segments = 1000000) {
  while (!(c.horizon() > t)) {
    if (c.size() >= max_segments)
      throw budget_error("BudgetExceeded", "segment budget exhausted before the requested time");
    extend_to_count<D>(c, lambda, prof, k, c.size() + 1, rng);
  }
}

template <int D>
SegmentChain<D> sample_chain(const Vec<D>& Q0, const DirectionDensity<D>& lambda, const ScatteringProfile& prof,
                             const KernelBackend<D>& k, std::size_t n, Rng& rng) {
  SegmentChain<D> c;
  c.Q0 = Q0;
  extend_to_count<D>(c, lambda, prof, k, n, rng);
  return c;
}

/// Xi(t) on the semi-open convention: for T_n <= t < T_{n+1} the particle is at
/// Q0 + S_1 + ... + S_n + (t - T_n) S_{n+1}^ with velocity S_{n+1}^.
template <int D> PhasePoint<D> evaluate_path(const SegmentChain<D>& c, double t) {
  if (!(t >= 0.0)) throw config_error("BadTime", "t must be nonnegative");
  if (!(t < c.horizon())) throw budget_error("BeyondHorizon", "t is not below the last collision time");
  const std::size_t n = static_cast<std::size_t>(std::upper_bound(c.T.begin(), c.T.end(), t) - c.T.begin());
  Vec<D> q = c.Q0;
  for (std::size_t j = 0; j < n; ++j) q += c.segment(j);
  const double tn = n == 0 ? 0.0 : c.T[n - 1];
  const Vec<D> v = c.dirs[n];
  return {Vec<D>(q + (t - tn) * v), v};
}

/// (Q, V) from the initial law, then (xi, V+) from p(V, ., .).
template <int D>
ExtendedState<D> sample_extended_initial(const PhaseLaw<D>& law, const ScatteringProfile& prof,
                                         const KernelBackend<D>& k, Rng& rng) {
  const auto [q, v] = law.sample(rng);
  const double xi = k.sample_xi(Source::Generic, Perp<D>::Zero(), rng);
  const Perp<D> w = k.sample_w(Source::Generic, xi, Perp<D>::Zero(), rng);
  return {q, v, xi, detail::exit_direction<D>(prof, v, w)};
}

/// One jump of X-hat: the velocity becomes V+, and (xi', V+') is drawn from
/// p_{0, beta+_V}(V+, ., .).
template <int D>
ExtendedState<D> xhat_jump(const ExtendedState<D>& s, const ScatteringProfile& prof, const KernelBackend<D>& k,
                           Rng& rng) {
  const auto z = exit_offset<D>(prof, s.V, s.V_plus);
  if (!z) throw Error(ErrorKind::Validation, "DegenerateKernel", "state is not admissible");
  const double xi = k.sample_xi(Source::Lattice, *z, rng);
  const Perp<D> w = k.sample_w(Source::Lattice, xi, *z, rng);
  return {s.Q, s.V_plus, xi, detail::exit_direction<D>(prof, s.V_plus, w)};
}

/// States of X-hat at each time of an increasing grid. Between jumps Q moves with
/// velocity V and xi decreases at unit rate; a jump happens when xi reaches 0.
/// Positions and xi are recomputed from the last jump, so xi(t) = xi_j - (t - t_j).
template <int D>
std::vector<ExtendedState<D>> simulate_xhat(const ExtendedState<D>& initial, const ScatteringProfile& prof,
                                            const KernelBackend<D>& k, const std::vector<double>& t_grid, Rng& rng,
                                            std::size_t max_jumps = 1000000) {
  std::vector<ExtendedState<D>> out;
  out.reserve(t_grid.size());
  ExtendedState<D> anchor = initial;  // state right after the last jump
  double t_jump = 0.0, prev = 0.0;
  std::size_t jumps = 0;
  for (double t : t_grid) {
    if (t < prev) throw config_error("BadTimeGrid", "time grid must be increasing");
    prev = t;
    while (t - t_jump >= anchor.xi) {
      anchor.Q += anchor.xi * anchor.V;
      t_jump += anchor.xi;
      anchor = xhat_jump<D>(anchor, prof, k, rng);
      if (++jumps > max_jumps) throw budget_error("BudgetExceeded", "jump budget exhausted");
    }
    ExtendedState<D> s = anchor;
    s.Q += (t - t_jump) * anchor.V;
    s.xi = anchor.xi - (t - t_jump);
    out.push_back(s);
  }
  return out;
}

/// Jump times and post-jump states of X-hat up to time t.
template <int D>
std::vector<std::pair<double, ExtendedState<D>>> xhat_jumps(const ExtendedState<D>& initial,
                                                            const ScatteringProfile& prof, const KernelBackend<D>& k,
                                                            double t, Rng& rng, std::size_t max_jumps = 1000000) {
  std::vector<std::pair<double, ExtendedState<D>>> out;
  ExtendedState<D> s = initial;
  double now = 0.0;
  while (now + s.xi <= t) {
    s.Q += s.xi * s.V;
    now += s.xi;
    s = xhat_jump<D>(s, prof, k, rng);
    out.emplace_back(now, s);
    if (out.size() > max_jumps) throw budget_error("BudgetExceeded", "jump budget exhausted");
  }
  return out;
}

}  // namespace lorentz
