#pragma once

#include "lorentz/directions.hpp"
#include "lorentz/errors.hpp"
#include "lorentz/kernels.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/microsim.hpp"
#include "lorentz/parallel.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace lorentz {

struct ComparisonReport {
  std::string name;
  std::string statistic;  // "KS", "chi-square" or "mean-diff"
  double value = 0.0;
  std::size_t n_a = 0, n_b = 0;
  double p_value = 1.0;   // for mean-diff: the distance in standard errors
  double threshold = 0.01;
  bool pass = false;
  double dof = 0.0;
  std::string note;
};

inline nlohmann::json to_json(const ComparisonReport& r) {
  return {{"name", r.name},   {"statistic", r.statistic}, {"value", r.value},         {"n_a", r.n_a},
          {"n_b", r.n_b},     {"p_value", r.p_value},     {"threshold", r.threshold}, {"pass", r.pass},
          {"dof", r.dof},     {"note", r.note}};
}

/// Kolmogorov survival function Q(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2).
inline double kolmogorov_q(double l) {
  if (l < 1e-3) return 1.0;
  if (l < 1.18) {
    // small-l form: 1 - sqrt(2 pi)/l sum exp(-(2k-1)^2 pi^2 / (8 l^2))
    double s = 0.0;
    for (int k = 1; k <= 6; ++k) s += std::exp(-(2 * k - 1) * (2 * k - 1) * pi * pi / (8 * l * l));
    return std::clamp(1.0 - std::sqrt(2 * pi) / l * s, 0.0, 1.0);
  }
  double s = 0.0, sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * l * l);
    s += sign * term;
    if (term < 1e-17) break;
    sign = -sign;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

namespace detail {

inline double ks_p(double dist, double n_eff) {
  const double sn = std::sqrt(n_eff);
  return kolmogorov_q((sn + 0.12 + 0.11 / sn) * dist);
}

inline void require_samples(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::Validation, "EmptySample", "sample is empty");
}

}  // namespace detail

/// Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value (Stephens' correction).
inline ComparisonReport ks_two_sample(std::vector<double> a, std::vector<double> b, double threshold = 0.01) {
  detail::require_samples(a.size());
  detail::require_samples(b.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  ComparisonReport r;
  r.statistic = "KS";
  r.value = d;
  r.n_a = a.size();
  r.n_b = b.size();
  r.p_value = detail::ks_p(d, na * nb / (na + nb));
  r.threshold = threshold;
  r.pass = r.p_value > threshold;
  return r;
}

/// One-sample KS test against a continuous CDF.
inline ComparisonReport ks_one_sample(std::vector<double> a, const std::function<double(double)>& cdf,
                                      double threshold = 0.01) {
  detail::require_samples(a.size());
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double f = cdf(a[i]);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  ComparisonReport r;
  r.statistic = "KS";
  r.value = d;
  r.n_a = a.size();
  r.p_value = detail::ks_p(d, n);
  r.threshold = threshold;
  r.pass = r.p_value > threshold;
  return r;
}

inline double chi_square_sf(double x, double dof) {
  if (dof <= 0.0) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), std::max(x, 0.0)));
}

/// Pearson statistic and degrees of freedom of an r x c contingency table; empty rows
/// and columns are dropped.
struct ChiSquarePart {
  double stat = 0.0;
  double dof = 0.0;
};

inline ChiSquarePart chi_square_contingency(const std::vector<std::vector<double>>& table) {
  std::vector<double> row(table.size(), 0.0), col;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (col.size() < table[i].size()) col.resize(table[i].size(), 0.0);
    for (std::size_t j = 0; j < table[i].size(); ++j) {
      row[i] += table[i][j];
      col[j] += table[i][j];
    }
  }
  const double n = std::accumulate(row.begin(), row.end(), 0.0);
  ChiSquarePart out;
  if (n == 0.0) return out;
  const auto nr = std::count_if(row.begin(), row.end(), [](double x) { return x > 0; });
  const auto nc = std::count_if(col.begin(), col.end(), [](double x) { return x > 0; });
  if (nr < 2 || nc < 2) return out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (row[i] == 0) continue;
    for (std::size_t j = 0; j < col.size(); ++j) {
      if (col[j] == 0) continue;
      const double e = row[i] * col[j] / n;
      const double o = j < table[i].size() ? table[i][j] : 0.0;
      out.stat += (o - e) * (o - e) / e;
    }
  }
  out.dof = static_cast<double>((nr - 1) * (nc - 1));
  return out;
}

/// Homogeneity of two binned samples (integer bin labels).
inline ComparisonReport chi_square_homogeneity(const std::vector<int>& a, const std::vector<int>& b, int n_bins,
                                               double threshold = 0.01) {
  detail::require_samples(a.size());
  detail::require_samples(b.size());
  std::vector<std::vector<double>> t(2, std::vector<double>(n_bins, 0.0));
  for (int x : a) t[0][x] += 1;
  for (int x : b) t[1][x] += 1;
  const auto part = chi_square_contingency(t);
  ComparisonReport r;
  r.statistic = "chi-square";
  r.value = part.stat;
  r.dof = part.dof;
  r.n_a = a.size();
  r.n_b = b.size();
  r.p_value = chi_square_sf(part.stat, part.dof);
  r.threshold = threshold;
  r.pass = r.p_value > threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Memory-two structure

template <int D> using Triple = std::array<Vec<D>, 3>;

struct MemoryTwoBins {
  int n_s1 = 3;     // quantile bins of |S1| (the variable tested for)
  int n_turn = 6;   // bins of the turn angle between S1^ and S2^ (stratum)
  int n_s2 = 5;     // quantile bins of |S2| (stratum)
  int n_resp = 8;   // bins of the S3^ response, measured in the frame of S2^
  std::size_t min_samples = 100000;
};

namespace detail {

inline std::vector<double> quantile_edges(std::vector<double> x, int n) {
  std::sort(x.begin(), x.end());
  std::vector<double> e(n + 1);
  e[0] = -std::numeric_limits<double>::infinity();
  e[n] = std::numeric_limits<double>::infinity();
  for (int i = 1; i < n; ++i) e[i] = x[x.size() * i / n];
  return e;
}

// Angle of S3^ measured from S2^, and its side relative to the plane of (S1^, S2^),
// folded so that mirror images share a bin. Returns a value in [0, 2).
template <int D> double response_coordinate(const Vec<D>& a, const Vec<D>& b, const Vec<D>& c) {
  const double ang = angle_between(b, c) / pi;  // [0, 1]
  if constexpr (D == 2) {
    const double turn12 = a[0] * b[1] - a[1] * b[0];
    const double turn23 = b[0] * c[1] - b[1] * c[0];
    return (turn12 * turn23 >= 0.0 ? 0.0 : 1.0) + ang;
  } else {
    // azimuth of c around b, from the in-plane direction of a, folded into [0, pi]
    Vec<D> e = a - a.dot(b) * b;
    if (e.norm() < 1e-12) e = any_orthogonal<D>(b);
    e.normalize();
    const Vec<D> f = b.cross(e);
    const Vec<D> cp = c - c.dot(b) * b;
    const double az = std::abs(std::atan2(cp.dot(f), cp.dot(e))) / pi;  // [0, 1]
    return (az < 0.5 ? 0.0 : 1.0) + ang;
  }
}

}  // namespace detail

/// Chi-square test that the law of S3^ given (S1^, S2^, |S2|) does not depend on
/// |S1|. Triples are stratified by (turn angle of S1^ -> S2^, |S2|); within each
/// stratum a contingency table (|S1| bin x response bin) is formed, and the
/// Pearson statistics and degrees of freedom are summed over strata.
/// With `drop_s1_direction` the turn-angle stratification is skipped, which tests
/// independence of S1 altogether (memory one).
template <int D>
ComparisonReport memory_two_test(const std::vector<Triple<D>>& triples, const MemoryTwoBins& bins,
                                 bool drop_s1_direction = false, double threshold = 0.01) {
  if (triples.size() < bins.min_samples)
    throw Error(ErrorKind::Validation, "InsufficientSamples", "memory-two test needs more triples");
  std::vector<double> r1, r2;
  for (const auto& t : triples) {
    r1.push_back(t[0].norm());
    r2.push_back(t[1].norm());
  }
  const auto e1 = detail::quantile_edges(r1, bins.n_s1);
  const auto e2 = detail::quantile_edges(r2, bins.n_s2);
  const int n_turn = drop_s1_direction ? 1 : bins.n_turn;
  const int n_group = drop_s1_direction ? bins.n_s1 * bins.n_turn : bins.n_s1;
  // strata -> group -> response
  std::vector<std::vector<std::vector<double>>> tables(
      static_cast<std::size_t>(n_turn) * bins.n_s2,
      std::vector<std::vector<double>>(n_group, std::vector<double>(bins.n_resp, 0.0)));
  for (const auto& t : triples) {
    const Vec<D> a = t[0].normalized(), b = t[1].normalized(), c = t[2].normalized();
    const int g1 = detail::bin_of(e1, t[0].norm());
    const int g2 = detail::bin_of(e2, t[1].norm());
    const int turn = std::min(bins.n_turn - 1, static_cast<int>(angle_between(a, b) / pi * bins.n_turn));
    const int resp =
        std::min(bins.n_resp - 1, static_cast<int>(detail::response_coordinate<D>(a, b, c) / 2.0 * bins.n_resp));
    const int stratum = (drop_s1_direction ? 0 : turn) * bins.n_s2 + g2;
    const int group = drop_s1_direction ? g1 * bins.n_turn + turn : g1;
    tables[stratum][group][resp] += 1.0;
  }
  double stat = 0.0, dof = 0.0;
  for (const auto& tab : tables) {
    const auto part = chi_square_contingency(tab);
    stat += part.stat;
    dof += part.dof;
  }
  ComparisonReport r;
  r.name = drop_s1_direction ? "memory_one" : "memory_two";
  r.statistic = "chi-square";
  r.value = stat;
  r.dof = dof;
  r.n_a = triples.size();
  r.p_value = chi_square_sf(stat, dof);
  r.threshold = threshold;
  r.pass = r.p_value > threshold;
  return r;
}

/// First three rescaled segments of micro trajectories from q0 with V0 ~ lambda.
/// Trajectory i uses RNG stream (seed, i). Trajectories with a flight longer than
/// cfg.t_max are dropped; their number goes to `censored` when given.
template <int D>
std::vector<Triple<D>> micro_triples(const MicroConfig<D>& cfg, const Vec<D>& q0, const DirectionDensity<D>& lambda,
                                     std::size_t n, std::uint64_t seed, unsigned threads,
                                     std::size_t* censored = nullptr) {
  check_config(cfg);
  const auto parts = parallel_blocks(n, 1024, threads, [&](std::size_t b, std::size_t e) {
    std::vector<Triple<D>> out;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(seed, i);
      const Vec<D> v0 = lambda.sample(rng);
      const auto chain = iterate_billiard<D>(cfg, q0, v0, 3);
      if (chain.records.size() < 3) continue;
      const auto s = segments<D>(chain, cfg.rho);
      out.push_back({s[0], s[1], s[2]});
    }
    return out;
  });
  std::vector<Triple<D>> all;
  for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  if (censored) *censored = n - all.size();
  return all;
}

/// First three segments of the limiting chain.
template <int D>
std::vector<Triple<D>> chain_triples(const DirectionDensity<D>& lambda, const ScatteringProfile& prof,
                                     const KernelBackend<D>& k, std::size_t n, std::uint64_t seed, unsigned threads) {
  const auto parts = parallel_blocks(n, 1024, threads, [&](std::size_t b, std::size_t e) {
    std::vector<Triple<D>> out;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(seed, i);
      const auto c = sample_chain<D>(Vec<D>::Zero(), lambda, prof, k, 3, rng);
      out.push_back({c.segment(0), c.segment(1), c.segment(2)});
    }
    return out;
  });
  std::vector<Triple<D>> all;
  for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return all;
}

/// Chain with memory three, for power checks: the third direction is mirrored in
/// the plane of (S1^, S2^) whenever |S1| exceeds the median of the kernel.
template <int D>
std::vector<Triple<D>> synthetic_order3_triples(const DirectionDensity<D>& lambda, const ScatteringProfile& prof,
                                                const KernelBackend<D>& k, std::size_t n, std::uint64_t seed) {
  auto t = chain_triples<D>(lambda, prof, k, n, seed, 1);
  std::vector<double> r1;
  for (const auto& x : t) r1.push_back(x[0].norm());
  std::nth_element(r1.begin(), r1.begin() + r1.size() / 2, r1.end());
  const double med = r1[r1.size() / 2];
  for (auto& x : t) {
    if (x[0].norm() <= med) continue;
    const Vec<D> b = x[1].normalized();
    // reflect S3 across the line of S2 within the (S1, S2) plane: keep the angle
    // to S2, flip the side
    Vec<D> e = x[0].normalized() - x[0].normalized().dot(b) * b;
    if (e.norm() < 1e-12) continue;
    e.normalize();
    x[2] = x[2] - 2.0 * x[2].dot(e) * e;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Liouville phase-volume check

/// Two independent uniform samples of the phase space of the torus outside the
/// scatterers; the second is pushed forward by the flow for time t. Points are
/// binned by position in the unit cell (n_q^d bins) and velocity angle (n_v bins),
/// and the two histograms are compared for homogeneity.
template <int D>
ComparisonReport liouville_phase_volume(const MicroConfig<D>& cfg, double t, std::size_t n, int n_q, int n_v,
                                        std::uint64_t seed, unsigned threads) {
  check_config(cfg);
  const int n_bins = static_cast<int>(std::pow(n_q, D)) * n_v;
  auto bin = [&](const Vec<D>& q, const Vec<D>& v) {
    const Vec<D> x = q * cfg.lattice.inverse_basis;
    int idx = 0;
    for (int i = 0; i < D; ++i) {
      const double f = x[i] - std::floor(x[i]);
      idx = idx * n_q + std::min(n_q - 1, static_cast<int>(f * n_q));
    }
    double a;
    if constexpr (D == 2) {
      a = (std::atan2(v[1], v[0]) + pi) / (2 * pi);
    } else {
      a = 0.5 * (v[2] + 1.0);  // uniform for uniform directions
    }
    return idx * n_v + std::min(n_v - 1, static_cast<int>(a * n_v));
  };
  auto draw = [&](Rng& rng) {
    for (;;) {
      Vec<D> u;
      for (int i = 0; i < D; ++i) u[i] = rng.uniform();
      const Vec<D> q = u * cfg.lattice.basis;
      if (!inside_some_ball(cfg.lattice, q, cfg.rho * (1.0 + 1e-9))) return std::pair{q, rng.unit_vector<D>()};
    }
  };
  const auto parts = parallel_blocks(n, 1024, threads, [&](std::size_t b, std::size_t e) {
    std::pair<std::vector<int>, std::vector<int>> out;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(seed, i);
      const auto [qa, va] = draw(rng);
      out.first.push_back(bin(qa, va));
      const auto [qb, vb] = draw(rng);
      const auto p = flow<D>(cfg, qb, vb, t);
      out.second.push_back(bin(p.q, p.v));
    }
    return out;
  });
  std::vector<int> a, b;
  for (const auto& p : parts) {
    a.insert(a.end(), p.first.begin(), p.first.end());
    b.insert(b.end(), p.second.begin(), p.second.end());
  }
  auto r = chi_square_homogeneity(a, b, n_bins);
  r.name = "liouville_phase_volume";
  return r;
}

// ---------------------------------------------------------------------------
// Convergence in rho

enum class Observable { FirstLength, SecondLength, TurnAngle };

inline Observable parse_observable(const std::string& s) {
  if (s == "first_length") return Observable::FirstLength;
  if (s == "second_length") return Observable::SecondLength;
  if (s == "turn_angle") return Observable::TurnAngle;
  throw config_error("BadObservable", "unknown observable " + s);
}

template <int D> double observe(const Triple<D>& t, Observable o) {
  switch (o) {
    case Observable::FirstLength: return t[0].norm();
    case Observable::SecondLength: return t[1].norm();
    case Observable::TurnAngle: return angle_between(t[0], t[1]);
  }
  return 0.0;
}

/// KS distance of an observable at each rho against the smallest rho in the list.
template <int D>
std::vector<ComparisonReport> bg_convergence_study(const std::vector<MicroConfig<D>>& configs, const Vec<D>& q0,
                                                   const DirectionDensity<D>& lambda, std::size_t n_rays,
                                                   Observable obs, std::uint64_t seed, unsigned threads) {
  if (configs.size() < 2) throw config_error("BadConfig", "need at least two radii");
  for (std::size_t i = 1; i < configs.size(); ++i)
    if (!(configs[i].rho < configs[i - 1].rho)) throw config_error("BadConfig", "radii must decrease");
  std::vector<std::vector<double>> samples;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto t = micro_triples<D>(configs[i], q0, lambda, n_rays, mix64(seed + i), threads);
    std::vector<double> x;
    for (const auto& s : t) x.push_back(observe<D>(s, obs));
    samples.push_back(std::move(x));
  }
  std::vector<ComparisonReport> out;
  for (std::size_t i = 0; i + 1 < configs.size(); ++i) {
    auto r = ks_two_sample(samples[i], samples.back());
    char buf[64];
    std::snprintf(buf, sizeof buf, "rho=%g vs rho=%g", configs[i].rho, configs.back().rho);
    r.name = buf;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Admissibility counterexample

struct AdmissibilityResult {
  double measured = 0.0;   // lambda(rho^{d-1} tau_1 > t1)
  double measured_se = 0.0;
  double predicted = 0.0;  // integral_{t1}^inf of the generic xi-marginal
  double predicted_se = 0.0;
  double naive = 0.0;      // n = 0 term of the limiting chain for D1 = B_{t1} x S^{d-1}
  bool inside_ball = true; // rho^{d-1} q0 + t1 v0 lies in B_{t1} for every sampled v0
  ComparisonReport report;
};

/// Probability that the rescaled particle has not collided by time t1, starting at
/// q0 with V0 ~ lambda, compared with the tail of the empirical kernel. The event
/// {Xi(t1) in B_{t1} x S^{d-1}, no collision} has limiting probability 0 under the
/// chain since |t1 S1^| = t1, while the micro probability stays positive.
template <int D>
AdmissibilityResult admissibility_experiment(const MicroConfig<D>& cfg, const Vec<D>& q0,
                                             const DirectionDensity<D>& lambda, double t1, std::size_t n_rays,
                                             const EmpiricalKernel<D>& kernel, std::uint64_t seed,
                                             unsigned threads) {
  check_config(cfg);
  if (!(t1 > 0.0)) throw config_error("BadTime", "t1 must be positive");
  const double s = std::pow(cfg.rho, D - 1);
  const auto parts = parallel_blocks(n_rays, 4096, threads, [&](std::size_t b, std::size_t e) {
    std::pair<std::uint64_t, bool> out{0, true};
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(seed, i);
      const Vec<D> v = lambda.sample(rng);
      out.second = out.second && (s * q0 + t1 * v).norm() < t1;
      const auto hit = free_path<D>(cfg.lattice, {q0, v}, cfg.rho, t1 / s);
      if (!hit) ++out.first;
    }
    return out;
  });
  AdmissibilityResult res;
  std::uint64_t survived = 0;
  for (const auto& p : parts) {
    survived += p.first;
    res.inside_ball = res.inside_ball && p.second;
  }
  const double n = static_cast<double>(n_rays);
  res.measured = survived / n;
  res.measured_se = std::sqrt(res.measured * (1 - res.measured) / n);
  res.predicted = kernel.survival(Source::Generic, t1, Perp<D>::Zero());
  const double nk = static_cast<double>(kernel.need_generic().sample_count);
  res.predicted_se = std::sqrt(res.predicted * (1 - res.predicted) / nk);
  res.naive = 0.0;
  auto& r = res.report;
  r.name = "admissibility";
  r.statistic = "mean-diff";
  r.value = res.measured - res.predicted;
  r.n_a = n_rays;
  r.n_b = static_cast<std::size_t>(nk);
  const double se = std::sqrt(res.measured_se * res.measured_se + res.predicted_se * res.predicted_se);
  r.p_value = se > 0.0 ? std::abs(r.value) / se : 0.0;
  r.threshold = 3.0;
  r.pass = res.inside_ball && res.measured > 0.0 && res.measured < 1.0 && r.p_value <= 3.0 && res.naive == 0.0;
  r.note = "p_value holds the distance in standard errors";
  return res;
}

}  // namespace lorentz
