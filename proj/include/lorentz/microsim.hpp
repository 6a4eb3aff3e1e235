#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/lattice.hpp"
#include "lorentz/scattering.hpp"

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace lorentz {

template <int D> struct MicroConfig {
  Lattice<D> lattice;
  ScatteringProfile profile;
  double rho = 0.0;
  double t_max = 1e6;      // longest single free flight searched
  std::size_t n_max = 1000000;  // collisions allowed inside one flow() call
};

template <int D> void check_config(const MicroConfig<D>& cfg) {
  if (!(cfg.rho > 0.0 && cfg.rho < 0.5 * cfg.lattice.shortest_vector))
    throw config_error("BadRadius", "need 0 < rho < shortest_vector / 2");
  if (!(cfg.t_max > 0.0)) throw config_error("BadCutoff", "t_max must be positive");
}

template <int D> struct CollisionRecord {
  double tau = 0.0;
  IVec<D> m;
  Vec<D> w;       // impact point on the unit sphere
  Vec<D> v;       // velocity after the collision
  Vec<D> w_plus;  // exit point on the unit sphere
};

enum class Termination { Collision, Cutoff };

template <int D> struct CollisionChain {
  Vec<D> q0;
  Vec<D> v0;
  std::vector<CollisionRecord<D>> records;
  Termination terminated_by = Termination::Collision;
};

/// Offset of the next flight's start from the centre of the ball just left.
template <int D> Vec<D> outgoing_offset(const Vec<D>& w_plus, double rho) { return rho * (1.0 + 1e-12) * w_plus; }

/// Follows the billiard through n collisions or until a flight exceeds t_max.
/// Each flight after the first starts on the ball it left, in coordinates centred
/// there, so positions never accumulate large offsets.
template <int D>
CollisionChain<D> iterate_billiard(const MicroConfig<D>& cfg, const Vec<D>& q0, const Vec<D>& v0, std::size_t n) {
  if (inside_some_ball(cfg.lattice, q0, cfg.rho))
    throw Error(ErrorKind::Validation, "StartInsideBall", "initial point lies inside a scatterer");
  CollisionChain<D> chain;
  chain.q0 = q0;
  chain.v0 = v0;
  chain.records.reserve(n);
  IVec<D> base = IVec<D>::Zero();
  Vec<D> q = q0;
  Vec<D> v = v0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto hit = free_path<D>(cfg.lattice, {q, v}, cfg.rho, cfg.t_max);
    if (!hit) {
      chain.terminated_by = Termination::Cutoff;
      return chain;
    }
    const auto out = theta<D>(cfg.profile, v, hit->w);
    CollisionRecord<D> rec{hit->tau, IVec<D>(base + hit->m), hit->w, out.v_plus, out.w_plus};
    chain.records.push_back(rec);
    base = rec.m;
    q = outgoing_offset<D>(out.w_plus, cfg.rho);
    v = out.v_plus;
  }
  chain.terminated_by = Termination::Collision;
  return chain;
}

template <int D> struct PhasePoint {
  Vec<D> q;
  Vec<D> v;
};

/// Billiard flow at time t with unit speed and instantaneous collisions.
template <int D> PhasePoint<D> flow(const MicroConfig<D>& cfg, const Vec<D>& q0, const Vec<D>& v0, double t) {
  if (inside_some_ball(cfg.lattice, q0, cfg.rho))
    throw Error(ErrorKind::Validation, "StartInsideBall", "initial point lies inside a scatterer");
  IVec<D> base = IVec<D>::Zero();
  Vec<D> q = q0;
  Vec<D> v = v0;
  double elapsed = 0.0;
  std::size_t count = 0;
  while (true) {
    const double left = t - elapsed;
    const auto hit = free_path<D>(cfg.lattice, {q, v}, cfg.rho, left);
    if (!hit || hit->tau > left) return {cfg.lattice.point(base) + q + left * v, v};
    if (++count > cfg.n_max) throw budget_error("CutoffExceeded", "more than n_max collisions before t");
    const auto out = theta<D>(cfg.profile, v, hit->w);
    elapsed += hit->tau;
    base += hit->m;
    q = outgoing_offset<D>(out.w_plus, cfg.rho);
    v = out.v_plus;
  }
}

/// Macroscopic flow Q(t) = rho^{d-1} q(rho^{1-d} t).
template <int D> PhasePoint<D> macro_flow(const MicroConfig<D>& cfg, const Vec<D>& Q0, const Vec<D>& V0, double t) {
  if (t == 0.0) return {Q0, V0};
  const double s = std::pow(cfg.rho, D - 1);
  const auto p = flow<D>(cfg, Vec<D>(Q0 / s), V0, t / s);
  return {s * p.q, p.v};
}

/// Rescaled path segments S_k = rho^{d-1} tau_k v_{k-1}.
template <int D> std::vector<Vec<D>> segments(const CollisionChain<D>& chain, double rho) {
  const double s = std::pow(rho, D - 1);
  std::vector<Vec<D>> out;
  out.reserve(chain.records.size());
  Vec<D> prev = chain.v0;
  for (const auto& r : chain.records) {
    out.push_back(s * r.tau * prev);
    prev = r.v;
  }
  return out;
}

template <int D> struct ExtendedState {
  Vec<D> Q;
  Vec<D> V;
  double xi = 0.0;
  Vec<D> V_plus;
};

/// Lift (Q, V) to (Q, V, remaining rescaled free path, next velocity).
template <int D> ExtendedState<D> extended_lift(const MicroConfig<D>& cfg, const Vec<D>& Q, const Vec<D>& V) {
  const double s = std::pow(cfg.rho, D - 1);
  const auto hit = free_path<D>(cfg.lattice, {Vec<D>(Q / s), V}, cfg.rho, cfg.t_max);
  if (!hit) throw budget_error("NoCollisionWithinCutoff", "no collision within t_max");
  return {Q, V, s * hit->tau, theta<D>(cfg.profile, V, hit->w).v_plus};
}

}  // namespace lorentz
