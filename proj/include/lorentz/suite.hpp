#pragma once

// Acceptance checks. Each check runs one criterion at its stated tolerance and
// reports the measured quantities next to their bounds.

#include "lorentz/io.hpp"
#include "lorentz/kernels.hpp"
#include "lorentz/manifest.hpp"
#include "lorentz/propagator.hpp"
#include "lorentz/validation.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lorentz {

struct CheckResult {
  CheckResult() = default;
  explicit CheckResult(std::string n) : name(std::move(n)) {}

  std::string name;
  bool pass = true;
  std::vector<std::string> details;
  double seconds = 0.0;

  /// Records a measured quantity against its bound.
  void expect(bool ok, const std::string& what) {
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    pass = pass && ok;
  }

  nlohmann::json to_json() const {
    return tagged("check", {{"name", name}, {"pass", pass}, {"details", details}});
  }
};

struct SuiteContext {
  std::uint64_t seed = 20240601;
  unsigned threads = 1;
  std::string cli;                       // CLI binary for the determinism check; empty skips that part
  std::filesystem::path work_dir = std::filesystem::temp_directory_path() / "lorentz_suite";

  // Kernels shared between checks, estimated on first use.
  std::optional<EmpiricalKernel<2>> fine_a, fine_b, medium;
  std::optional<EmpiricalKernel<3>> coarse3;
};

namespace suite {

inline std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

template <int D> MicroConfig<D> unit_config(double rho, ScatteringProfile prof = ScatteringProfile::specular()) {
  MicroConfig<D> cfg;
  cfg.lattice = build_lattice<D>(Mat<D>::Identity());
  cfg.profile = std::move(prof);
  cfg.rho = rho;
  return cfg;
}

// Base points with irrational coordinates.
inline Vec<2> q_a() { return Vec<2>(0.5 * (std::sqrt(5.0) - 1.0), std::sqrt(2.0) - 1.0); }
inline Vec<2> q_b() { return Vec<2>(std::sqrt(3.0) - 1.0, 0.5 * std::sqrt(7.0) - 1.0); }
inline Vec<3> q_c() { return Vec<3>(std::sqrt(2.0) - 1.0, std::sqrt(3.0) - 1.0, 0.5 * std::sqrt(5.0) - 0.5); }

inline ScatteringProfile cutoff_profile() {
  // theta1 = 1.6 phi, so B = 0.2 pi
  return ScatteringProfile::analytic([](double p) { return 1.6 * p; }, [](double) { return 1.6; },
                                     [](double p) { return 0.6 * p; });
}

inline ScatteringProfile distorted_profile() {
  return ScatteringProfile::analytic([](double p) { return 2 * p; }, [](double) { return 2.0; },
                                     [](double p) { return p + 0.4 * std::sin(p); });
}

inline KernelBins fine_bins() { return KernelBins{6.0, 30, 5, 4, 2}; }

inline const EmpiricalKernel<2>& fine_kernel(SuiteContext& c, bool second) {
  auto& slot = second ? c.fine_b : c.fine_a;
  if (!slot) {
    EstimateOptions o;
    o.bins = fine_bins();
    o.seed = mix64(c.seed + (second ? 2 : 1));
    o.threads = c.threads;
    slot = estimate_phi<2>(unit_config<2>(1e-3), second ? q_b() : q_a(), 1000000, 0, o);
  }
  return *slot;
}

inline const EmpiricalKernel<2>& medium_kernel(SuiteContext& c) {
  if (!c.medium) {
    EstimateOptions o;
    o.bins = fine_bins();
    o.seed = mix64(c.seed + 3);
    o.threads = c.threads;
    c.medium = estimate_phi<2>(unit_config<2>(1e-2), q_a(), 200000, 200000, o);
  }
  return *c.medium;
}

inline const EmpiricalKernel<3>& coarse_kernel3(SuiteContext& c) {
  if (!c.coarse3) {
    EstimateOptions o;
    o.bins = KernelBins{4.0, 16, 4, 3, 3};
    o.seed = mix64(c.seed + 4);
    o.threads = c.threads;
    c.coarse3 = estimate_phi<3>(unit_config<3>(0.05), q_c(), 100000, 100000, o);
  }
  return *c.coarse3;
}

template <int D> Mat<D> random_orthogonal(Rng& rng) {
  Mat<D> g;
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat<D>> qr(g);
  return qr.householderQ();
}

template <int D> Vec<D> admissible_after(const ScatteringProfile& prof, const Vec<D>& v, Rng& rng) {
  for (;;) {
    const Vec<D> u = rng.unit_vector<D>();
    if (angle_between(v, u) > prof.b_theta() + 1e-3) return u;
  }
}

template <int D> std::vector<Vec<D>> random_segments(const ScatteringProfile& prof, int n, Rng& rng) {
  std::vector<Vec<D>> s;
  Vec<D> dir = rng.unit_vector<D>();
  for (int k = 0; k < n; ++k) {
    if (k > 0) dir = admissible_after<D>(prof, dir, rng);
    s.push_back(rng.uniform(0.05, 2.0) * dir);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Collision oracle: every lattice point within t_max + rho of the origin, entry
// time from the quadratic in extended precision.

template <int D> struct OracleHit {
  long double tau;
  IVec<D> m;
};

template <int D>
std::optional<OracleHit<D>> brute_force(const Lattice<D>& lat, const Vec<D>& q, const Vec<D>& v, double rho,
                                        double t_max) {
  const Vec<D> x = q * lat.inverse_basis;
  IVec<D> lo, hi;
  for (int i = 0; i < D; ++i) {
    const double r = (t_max + rho) * lat.inverse_basis.col(i).norm() + 1;
    lo[i] = static_cast<long long>(std::floor(x[i] - r));
    hi[i] = static_cast<long long>(std::ceil(x[i] + r));
  }
  std::optional<OracleHit<D>> best;
  IVec<D> m = lo;
  for (;;) {
    long double c[D], qq[D], vv[D];
    for (int i = 0; i < D; ++i) {
      c[i] = 0;
      for (int j = 0; j < D; ++j) c[i] += static_cast<long double>(m[j]) * lat.basis(j, i);
      qq[i] = q[i];
      vv[i] = v[i];
    }
    long double b = 0, cc = -static_cast<long double>(rho) * rho, vn = 0;
    for (int i = 0; i < D; ++i) {
      b += vv[i] * (qq[i] - c[i]);
      cc += (qq[i] - c[i]) * (qq[i] - c[i]);
      vn += vv[i] * vv[i];
    }
    b /= vn;
    cc /= vn;
    const long double disc = b * b - cc;
    if (disc > 0 && -b > 0) {
      const long double tau = -b - std::sqrt(disc);
      if (tau > 0 && tau <= t_max && (!best || tau < best->tau)) best = OracleHit<D>{tau, m};
    }
    int i = 0;
    for (; i < D; ++i) {
      if (m[i] < hi[i]) {
        ++m[i];
        break;
      }
      m[i] = lo[i];
    }
    if (i == D) break;
  }
  return best;
}

template <int D> Mat<D> random_unimodular(Rng& rng) {
  Mat<D> M = Mat<D>::Identity();
  for (int k = 0; k < 4; ++k) {
    const int i = static_cast<int>(rng() % D);
    int j = static_cast<int>(rng() % D);
    if (j == i) j = (i + 1) % D;
    Mat<D> E = Mat<D>::Identity();
    E(i, j) = static_cast<double>(static_cast<long long>(rng() % 3) - 1);
    M = E * M;
  }
  return M;
}

/// Returns (mismatches, hits, worst relative tau error).
template <int D> std::tuple<int, int, double> oracle_queries(int n, std::uint64_t seed, double t_max_cap) {
  Rng rng(seed, D);
  int bad = 0, hits = 0;
  double worst = 0.0;
  for (int k = 0; k < n; ++k) {
    Mat<D> basis = (k % 2 == 0) ? Mat<D>(Mat<D>::Identity()) : random_unimodular<D>(rng);
    Mat<D> skew = Mat<D>::Identity();
    skew(0, 1) = rng.uniform(-0.4, 0.4);
    basis = basis * skew;
    const auto lat = build_lattice<D>(basis);
    const double rho = std::min(std::exp(rng.uniform(std::log(1e-3), std::log(1e-1))), 0.45 * lat.shortest_vector);
    Vec<D> q;
    for (;;) {
      Vec<D> a;
      for (int i = 0; i < D; ++i) a[i] = rng.uniform(-3, 3);
      q = a * lat.basis;
      if (!inside_some_ball(lat, q, rho * 1.001)) break;
    }
    Vec<D> v;
    if (k % 3 == 0) {
      IVec<D> m;
      for (int i = 0; i < D; ++i) m[i] = static_cast<long long>(rng() % 9) - 4;
      v = (lat.point(m) + 0.9 * rho * rng.unit_vector<D>() - q).normalized();
    } else {
      v = rng.unit_vector<D>();
    }
    const double t_max = rng.uniform(1.0, t_max_cap);
    const auto got = free_path<D>(lat, {q, v}, rho, t_max);
    const auto want = brute_force<D>(lat, q, v, rho, t_max);
    if (got.has_value() != want.has_value()) {
      ++bad;
      continue;
    }
    if (!got) continue;
    ++hits;
    const double rel = static_cast<double>(std::abs(static_cast<long double>(got->tau) - want->tau) / want->tau);
    worst = std::max(worst, rel);
    if (got->m != want->m || rel > 1e-12) ++bad;
  }
  return {bad, hits, worst};
}

}  // namespace suite

inline CheckResult check_collision_oracle(SuiteContext& c) {
  CheckResult r{"collision_oracle"};
  const auto [bad2, hits2, worst2] = suite::oracle_queries<2>(500, c.seed, 150.0);
  const auto [bad3, hits3, worst3] = suite::oracle_queries<3>(500, c.seed + 1, 25.0);
  r.expect(bad2 == 0, "d=2: 500 queries, " + std::to_string(bad2) + " mismatches, " + std::to_string(hits2) +
                          " hits, max |dtau|/tau " + suite::num(worst2) + " <= 1e-12");
  r.expect(bad3 == 0, "d=3: 500 queries, " + std::to_string(bad3) + " mismatches, " + std::to_string(hits3) +
                          " hits, max |dtau|/tau " + suite::num(worst3) + " <= 1e-12");
  r.expect(hits2 > 100 && hits3 > 100, "both dimensions exercise hits");
  return r;
}

namespace suite {

template <int D> double distance_to_span(const Vec<D>& x, const Vec<D>& a, const Vec<D>& b) {
  Eigen::Matrix<double, D, 2> A;
  A.col(0) = a.transpose();
  A.col(1) = b.transpose();
  const Eigen::Matrix<double, D, 1> r = x.transpose() - A * A.colPivHouseholderQr().solve(x.transpose());
  return r.norm();
}

/// Worst deviations over 1000 inputs: (symmetry, planarity, beta round trip).
template <int D> std::array<double, 3> axiom_errors(const ScatteringProfile& prof, std::uint64_t seed) {
  Rng rng(seed, D);
  std::array<double, 3> e{0, 0, 0};
  for (int k = 0; k < 1000; ++k) {
    const Vec<D> v = rng.unit_vector<D>();
    Vec<D> w = rng.unit_vector<D>();
    if (v.dot(w) > 0) w = -w;
    const Mat<D> K = random_orthogonal<D>(rng);
    const auto a = theta<D>(prof, v, w);
    const auto b = theta<D>(prof, Vec<D>(v * K), Vec<D>(w * K));
    e[0] = std::max({e[0], (b.v_plus - a.v_plus * K).norm(), (b.w_plus - a.w_plus * K).norm()});
    if constexpr (D >= 3)
      e[1] = std::max({e[1], distance_to_span<D>(a.v_plus, v, w), distance_to_span<D>(a.w_plus, v, w)});
  }
  int done = 0;
  while (done < 1000) {
    const Vec<D> v = rng.unit_vector<D>(), u = rng.unit_vector<D>();
    const auto w = beta_minus<D>(prof, v, u);
    if (!w) continue;
    ++done;
    const auto out = theta<D>(prof, v, *w);
    const auto wp = beta_plus<D>(prof, v, u);
    e[2] = std::max(e[2], (out.v_plus - u).norm());
    e[2] = std::max(e[2], wp ? (out.w_plus - *wp).norm() : 1.0);
  }
  return e;
}

}  // namespace suite

inline CheckResult check_scattering_axioms(SuiteContext& c) {
  CheckResult r{"scattering_axioms"};
  for (const auto& [label, prof] : {std::pair<std::string, ScatteringProfile>{"specular", ScatteringProfile::specular()},
                                    {"cutoff", suite::cutoff_profile()}}) {
    const auto e2 = suite::axiom_errors<2>(prof, c.seed);
    const auto e3 = suite::axiom_errors<3>(prof, c.seed + 1);
    r.expect(std::max(e2[0], e3[0]) <= 1e-10, label + " spherical symmetry: " + suite::num(std::max(e2[0], e3[0])) + " <= 1e-10");
    r.expect(e3[1] <= 1e-10, label + " planarity (d=3): " + suite::num(e3[1]) + " <= 1e-10");
    r.expect(std::max(e2[2], e3[2]) <= 1e-10, label + " beta round trip: " + suite::num(std::max(e2[2], e3[2])) + " <= 1e-10");
  }
  const auto h = theta<3>(ScatteringProfile::specular(), Vec<3>(1, 0, 0), Vec<3>(-1, 0, 0));
  r.expect(h.v_plus == Vec<3>(-1, 0, 0) && h.w_plus == Vec<3>(-1, 0, 0), "specular head-on reverses exactly");
  return r;
}

inline CheckResult check_j_factor(SuiteContext& c) {
  CheckResult r{"j_factor"};
  const auto s = ScatteringProfile::specular();
  const double j0 = jacobian_j<2>(s, Vec<2>(1, 0), Vec<2>(-1, 0));
  r.expect(j0 == 0.5, "d=2 specular J(0) = " + suite::num(j0) + " == 1/2");
  Rng rng(c.seed, 3);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) worst = std::max(worst, std::abs(jacobian_j<3>(s, rng.unit_vector<3>(), rng.unit_vector<3>()) - 0.25));
  r.expect(worst <= 1e-12, "d=3 specular |J - 1/4| max " + suite::num(worst));
  for (const auto& [label, prof] : {std::pair<std::string, ScatteringProfile>{"specular", s}, {"cutoff", suite::cutoff_profile()}}) {
    const double i2 = integrate_sphere<2>([&](const Vec<2>& u) { return jacobian_j<2>(prof, Vec<2>(1, 0), u); },
                                          Vec<2>(1, 0), prof.b_theta(), 64, 8, 1);
    const double i3 = integrate_sphere<3>([&](const Vec<3>& u) { return jacobian_j<3>(prof, Vec<3>(1, 0, 0), u); },
                                          Vec<3>(1, 0, 0), prof.b_theta(), 64, 8, 1);
    r.expect(std::abs(i2 - 2.0) <= 1e-8, label + " int J (d=2) = " + suite::num(i2) + ", |.-2| <= 1e-8");
    r.expect(std::abs(i3 - pi) <= 1e-8, label + " int J (d=3) = " + suite::num(i3) + ", |.-pi| <= 1e-8");
  }
  return r;
}

inline CheckResult check_liouville(SuiteContext& c) {
  CheckResult r{"liouville"};
  r.expect(liouville_preserving(ScatteringProfile::specular(), 1000), "criterion: specular preserves");
  r.expect(!liouville_preserving(suite::distorted_profile(), 1000), "criterion: perturbed profile does not");
  const auto a = liouville_phase_volume<2>(suite::unit_config<2>(0.2), 3.0, 100000, 4, 8, c.seed, c.threads);
  r.expect(a.p_value > 0.01, "phase volume, specular: chi-square p = " + suite::num(a.p_value) + " > 0.01");
  const auto b = liouville_phase_volume<2>(suite::unit_config<2>(0.2, suite::distorted_profile()), 3.0, 100000, 4, 8,
                                          c.seed, c.threads);
  r.expect(b.p_value < 1e-3, "phase volume, perturbed: chi-square p = " + suite::num(b.p_value) + " < 1e-3");
  return r;
}

namespace suite {

/// Double integral of the generic table over (xi, w): bins by midpoint, tail by
/// Gauss-Legendre in 1 / xi.
template <int D> double integrate_generic(const EmpiricalKernel<D>& k) {
  const auto& t = *k.generic;
  double s = 0.0;
  for (int i = 0; i < t.n_xi(); ++i)
    for (int j = 0; j < t.n_w(); ++j) {
      Perp<D> w = Perp<D>::Zero();
      w[0] = 0.5 * (t.w_edges[j] + t.w_edges[j + 1]);
      s += k.phi(Source::Generic, 0.5 * (t.xi_edges[i] + t.xi_edges[i + 1]), w, Perp<D>::Zero()) *
           (t.xi_edges[i + 1] - t.xi_edges[i]) * detail::shell_volume<D>(t.w_edges[j], t.w_edges[j + 1]);
    }
  const double x0 = t.xi_edges.back();
  s += integrate_gl_composite(
           [&](double u) { return k.phi(Source::Generic, x0 / u, Perp<D>::Zero(), Perp<D>::Zero()) * x0 / (u * u); },
           0.0, 1.0, 32, 20) *
       unit_ball_volume(D - 1);
  return s;
}

}  // namespace suite

inline CheckResult check_kernel_normalization(SuiteContext& c) {
  CheckResult r{"kernel_normalization"};
  const auto& k = suite::fine_kernel(c, false);
  const double n = static_cast<double>(k.generic->sample_count);
  const double integral = suite::integrate_generic<2>(k);
  // largest binomial standard error of a probability mass estimated from n rays
  const double sigma = 0.5 / std::sqrt(n);
  r.expect(std::abs(integral - 1.0) <= 3 * sigma, "rho=1e-3, " + suite::num(n) + " rays: integral " +
                                                      suite::num(integral) + ", |.-1| <= 3 sigma = " + suite::num(3 * sigma));
  Rng rng(c.seed, 5);
  bool at_zero = true;
  for (int i = 0; i < 1000; ++i) at_zero = at_zero && k.phi(Source::Generic, 0.0, rng.in_ball<1>(), Perp<2>::Zero()) == 1.0;
  r.expect(at_zero, "Phi(0, w) == 1 exactly");
  r.expect(k.generic->censored * 100 < k.generic->sample_count,
           "censored rays " + std::to_string(k.generic->censored) + " below 1%");
  return r;
}

inline CheckResult check_alpha_rotation(SuiteContext& c) {
  CheckResult r{"alpha_rotation"};
  const auto& a = *suite::fine_kernel(c, false).generic;
  const auto& b = *suite::fine_kernel(c, true).generic;
  int populated = 0, outside = 0;
  for (std::size_t i = 0; i < a.counts.size(); ++i) {
    if (a.counts[i] + b.counts[i] == 0) continue;
    const double pa = static_cast<double>(a.counts[i]) / a.sample_count;
    const double pb = static_cast<double>(b.counts[i]) / b.sample_count;
    const double sd = std::sqrt(pa * (1 - pa) / a.sample_count + pb * (1 - pb) / b.sample_count);
    ++populated;
    if (std::abs(pa - pb) > 3.0 * sd) ++outside;
  }
  // each bin leaves 3 sigma with probability 0.0027; allow what chance explains at the 0.1% level
  const boost::math::binomial_distribution<> chance(populated, 0.0027);
  const int allowed = static_cast<int>(boost::math::quantile(chance, 0.999));
  r.expect(populated > 60 && outside <= allowed, "alpha: " + std::to_string(outside) + " of " +
                                                     std::to_string(populated) + " bins beyond 3 sigma, chance allows " +
                                                     std::to_string(allowed));
  // Psi rotation invariance, exponential backend
  double worst = 0.0;
  Rng rng(c.seed, 6);
  auto expo_psi = [&]<int D>(std::integral_constant<int, D>) {
    const ExponentialKernel<D> k;
    const auto prof = ScatteringProfile::specular();
    for (int i = 0; i < 200; ++i) {
      const auto S = suite::random_segments<D>(prof, 3, rng);
      const Mat<D> K = suite::random_orthogonal<D>(rng);
      const double v = psi<D>(prof, k, S[0], S[1], S[2]);
      const double w = psi<D>(prof, k, Vec<D>(S[0] * K), Vec<D>(S[1] * K), Vec<D>(S[2] * K));
      worst = std::max(worst, std::abs(v - w) / std::max(1.0, v));
    }
  };
  expo_psi(std::integral_constant<int, 2>{});
  expo_psi(std::integral_constant<int, 3>{});
  r.expect(worst <= 1e-10, "exponential Psi under rotation: " + suite::num(worst) + " <= 1e-10");
  // empirical backend: rotation moves a point across a bin edge only through roundoff;
  // differences are compared with the counting error of the p+ cell
  auto emp_psi = [&]<int D>(const EmpiricalKernel<D>& k, const std::string& label) {
    const auto prof = ScatteringProfile::specular();
    int bad = 0, total = 0;
    double worst_sigma = 0.0;
    for (int i = 0; i < 300; ++i) {
      const auto S = suite::random_segments<D>(prof, 3, rng);
      const Mat<D> K = suite::random_orthogonal<D>(rng);
      const double v = psi<D>(prof, k, S[0], S[1], S[2]);
      const double w = psi<D>(prof, k, Vec<D>(S[0] * K), Vec<D>(S[1] * K), Vec<D>(S[2] * K));
      const Vec<D> d1 = S[0].normalized(), d2 = S[1].normalized(), d3 = S[2].normalized();
      const auto z = exit_offset<D>(prof, d1, d2);
      const auto wv = impact_parameter<D>(prof, d2, d3);
      double n = 0.0;
      if (z && wv) n = k.cell_count(Source::Lattice, S[1].norm(), *wv, *z);
      const double sigma = n > 0 ? std::max(v, w) / std::sqrt(n) : 0.0;
      ++total;
      const double diff = std::abs(v - w);
      if (diff > 1e-10 * std::max(1.0, v)) {
        worst_sigma = std::max(worst_sigma, sigma > 0 ? diff / sigma : 1e300);
        if (diff > 3.0 * sigma) ++bad;
      }
    }
    r.expect(bad == 0, label + " empirical Psi under rotation: " + std::to_string(bad) + " of " +
                           std::to_string(total) + " beyond 3 sigma (worst " + suite::num(worst_sigma) + " sigma)");
  };
  emp_psi(suite::medium_kernel(c), "d=2");
  emp_psi(suite::coarse_kernel3(c), "d=3");
  return r;
}

inline CheckResult check_memory_two(SuiteContext& c) {
  CheckResult r{"memory_two"};
  std::size_t censored = 0;
  const auto t = micro_triples<2>(suite::unit_config<2>(1e-3), suite::q_a(), DirectionDensity<2>::uniform(), 102000,
                                  mix64(c.seed + 7), c.threads, &censored);
  r.expect(t.size() >= 100000, "micro triples at rho=1e-3: " + std::to_string(t.size()) + " >= 1e5 (" +
                                   std::to_string(censored) + " censored)");
  const auto m = memory_two_test<2>(t, MemoryTwoBins{});
  r.expect(m.p_value > 0.01, "micro: chi-square " + suite::num(m.value) + " on " + suite::num(m.dof) +
                                 " dof, p = " + suite::num(m.p_value) + " > 0.01");
  const auto s = synthetic_order3_triples<2>(DirectionDensity<2>::uniform(), ScatteringProfile::specular(),
                                             suite::medium_kernel(c), 100000, mix64(c.seed + 8));
  const auto ms = memory_two_test<2>(s, MemoryTwoBins{});
  r.expect(ms.p_value < 1e-3, "synthetic order-3 chain: p = " + suite::num(ms.p_value) + " < 1e-3");
  return r;
}

namespace suite {

template <int D> double p_norm_error(const ScatteringProfile& prof, std::uint64_t seed) {
  const ExponentialKernel<D> k;
  Rng rng(seed, D);
  const double sb = unit_ball_volume(D - 1);
  double worst = 0.0;
  for (int rep = 0; rep < 3; ++rep) {
    const Vec<D> v0 = rng.unit_vector<D>();
    const Vec<D> v1 = admissible_after<D>(prof, v0, rng);
    // Phi does not depend on w here, so the double integral factorizes
    const double a = integrate_sphere<D>([&](const Vec<D>& u) { return p_density<D>(prof, k, v0, 0.0, u); }, v0,
                                         prof.b_theta(), 64, 8);
    const double b = integrate_gl_composite(
        [&](double x) { return p_density<D>(prof, k, v0, x, v1) / p_density<D>(prof, k, v0, 0.0, v1); }, 0.0,
        60.0 / sb, 32, 16);
    const double cc = integrate_sphere<D>([&](const Vec<D>& u) { return p_plus_density<D>(prof, k, v0, v1, 0.0, u); },
                                          v1, prof.b_theta(), 64, 8);
    worst = std::max({worst, std::abs(a * b - 1.0), std::abs(cc * b - 1.0)});
  }
  return worst;
}

template <int D> double psi_closed_form_error(const ScatteringProfile& prof, std::uint64_t seed) {
  const ExponentialKernel<D> k;
  Rng rng(seed, D);
  const double sb = unit_ball_volume(D - 1);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto S = random_segments<D>(prof, 3, rng);
    const double r3 = S[2].norm();
    const double closed = std::pow(r3, 1 - D) * jacobian_j<D>(prof, Vec<D>(S[1].normalized()), Vec<D>(S[2] / r3)) *
                          std::exp(-sb * r3);
    worst = std::max(worst, std::abs(psi<D>(prof, k, S[0], S[1], S[2]) - closed) / std::max(1.0, closed));
  }
  return worst;
}

template <int D> std::shared_ptr<const KernelBackend<D>> expo() { return std::make_shared<ExponentialKernel<D>>(); }

}  // namespace suite

inline CheckResult check_exponential_closed_form(SuiteContext& c) {
  CheckResult r{"exponential_closed_form"};
  const auto specular = ScatteringProfile::specular();
  double pn = 0.0, ps = 0.0;
  for (const auto& prof : {specular, suite::cutoff_profile()}) {
    pn = std::max({pn, suite::p_norm_error<2>(prof, c.seed), suite::p_norm_error<3>(prof, c.seed)});
    ps = std::max({ps, suite::psi_closed_form_error<2>(prof, c.seed), suite::psi_closed_form_error<3>(prof, c.seed)});
  }
  r.expect(pn <= 1e-8, "p-norm: max |int p - 1| = " + suite::num(pn) + " <= 1e-8");
  r.expect(ps <= 1e-8, "Psi closed form: max deviation " + suite::num(ps) + " <= 1e-8");

  const auto p2 = p_phase<2>(specular, suite::expo<2>());
  const auto p3 = p_phase<3>(specular, suite::expo<3>());
  double zp = 0.0;
  for (const auto& s : phase_grid<2>(specular, 20, c.seed)) zp = std::max(zp, std::abs(z_apply<2>(specular, ExponentialKernel<2>(), p2, s)));
  for (const auto& s : phase_grid<3>(specular, 10, c.seed)) zp = std::max(zp, std::abs(z_apply<3>(specular, ExponentialKernel<3>(), p3, s)));
  r.expect(zp <= 1e-8, "d_xi identity: max |Z p| = " + suite::num(zp) + " <= 1e-8");

  const auto kt = kt_apply<2>(specular, suite::expo<2>(), p2, 1.0, 1e-10);
  double st = 0.0;
  for (const auto& s : phase_grid<2>(specular, 30, c.seed + 1)) st = std::max(st, std::abs(kt.density(s) - p2(s)));
  r.expect(st <= 1e-5, "stationarity K_1 p = p (d=2 quadrature): " + suite::num(st) + " <= 1e-5");

  const auto f = bump_density<2>(specular);
  const auto k04 = kt_apply<2>(specular, suite::expo<2>(), f, 0.4, 1e-12).density;
  const auto lhs = kt_apply<2>(specular, suite::expo<2>(), f, 1.0, 1e-12).density;
  const auto rhs = kt_apply<2>(specular, suite::expo<2>(), k04, 0.6, 1e-12).density;
  double sg = 0.0;
  for (const auto& s : phase_grid<2>(specular, 20, c.seed + 2)) sg = std::max(sg, std::abs(lhs(s) - rhs(s)));
  r.expect(sg <= 1e-4, "semigroup |K_1 f - K_0.6 K_0.4 f| = " + suite::num(sg) + " <= 1e-4");

  const double t = 1.5;
  double ratio = 0.0;
  for (const auto& g : {p2, f})
    for (int n = 1; n <= 8; ++n) {
      const auto kn = kn_apply<2>(specular, suite::expo<2>(), g, t, n);
      for (const auto& s : phase_grid<2>(specular, 50, c.seed + 3))
        ratio = std::max(ratio, std::abs(kn(s)) / jacobian_j<2>(specular, s.V, s.V_plus) / (g.j_norm * kn_norm_bound(n, t, 2)));
    }
  r.expect(ratio <= 1.0, "norm bound |K^(n) f|_J / bound, n=1..8, t=1.5: max " + suite::num(ratio) + " <= 1");
  return r;
}

inline CheckResult check_fpk_residual(SuiteContext& c) {
  CheckResult r{"fpk_residual"};
  const auto specular = ScatteringProfile::specular();
  const auto f = bump_density<2>(specular);
  const auto grid = phase_grid<2>(specular, 20, c.seed + 4);
  for (double t : {0.25, 0.5, 1.0}) {
    int fails = 0;
    double worst = 0.0, tol = 0.0;
    for (const auto& x : fpk_residuals<2>(specular, suite::expo<2>(), f, t, grid)) {
      if (!x.pass()) ++fails;
      worst = std::max(worst, x.value);
      tol = std::max(tol, x.tolerance);
    }
    r.expect(fails == 0, "t=" + suite::num(t) + ": " + std::to_string(fails) + " of 20 points above tolerance; max residual " +
                             suite::num(worst) + ", max tolerance " + suite::num(tol));
  }
  return r;
}

inline CheckResult check_admissibility(SuiteContext& c) {
  CheckResult r{"admissibility"};
  const auto cfg = suite::unit_config<2>(1e-3);
  const Vec<2> q0 = suite::q_a() + Vec<2>(3.0, 4.0);
  // directions pointing back past the origin keep rho q0 + t1 v inside the ball of radius t1
  const auto lam = DirectionDensity<2>::cap(Vec<2>(-q0.normalized()), 0.5);
  const auto res = admissibility_experiment<2>(cfg, q0, lam, 1.0, 1000000, suite::fine_kernel(c, false),
                                               mix64(c.seed + 9), c.threads);
  r.expect(res.inside_ball, "rho q0 + t1 v0 in B_t1 for every sampled v0");
  r.expect(res.measured > 0.0 && res.measured < 1.0, "measured survival " + suite::num(res.measured) + " in (0, 1)");
  r.expect(res.report.p_value <= 3.0, "kernel tail " + suite::num(res.predicted) + ", difference " +
                                          suite::num(res.report.p_value) + " sigma <= 3");
  r.expect(res.naive == 0.0, "n=0 chain term " + suite::num(res.naive) + " == 0");
  const auto short_t = admissibility_experiment<2>(cfg, q0, lam, 1e-3, 10000, suite::fine_kernel(c, false),
                                                   mix64(c.seed + 10), c.threads);
  r.expect(short_t.measured > 0.99, "t1=1e-3: survival " + suite::num(short_t.measured) + " > 0.99");
  return r;
}

namespace suite {

inline std::vector<std::pair<std::string, std::string>> determinism_configs() {
  return {
      {"simulate", "dimension = 2\n[micro]\nrho = 0.01\n[simulate]\nq0 = 0.3 0.2\ntrajectories = 300\ncollisions = 4\n"},
      {"estimate-kernel",
       "dimension = 2\n[micro]\nrho = 0.01\n[estimate]\nq0 = 0.3 0.2\nrays = 20000\noffset_rays = 20000\n"},
      {"chain", "dimension = 2\n[kernel]\nkind = exponential\n[chain]\ncount = 300\nsegments = 5\npath_times = 0 0.5 1 2\n"},
      {"propagate", "dimension = 2\n[propagate]\nf0 = bump\ntimes = 0.25 0.5\npoints = 3\n"},
  };
}

inline bool same_files(const std::filesystem::path& a, const std::filesystem::path& b, std::string& why) {
  std::vector<std::string> na, nb;
  for (const auto& e : std::filesystem::directory_iterator(a)) na.push_back(e.path().filename().string());
  for (const auto& e : std::filesystem::directory_iterator(b)) nb.push_back(e.path().filename().string());
  std::sort(na.begin(), na.end());
  std::sort(nb.begin(), nb.end());
  if (na != nb) {
    why = "different file sets";
    return false;
  }
  for (const auto& n : na)
    if (read_file((a / n).string()) != read_file((b / n).string())) {
      why = n + " differs";
      return false;
    }
  return !na.empty();
}

}  // namespace suite

inline CheckResult check_determinism(SuiteContext& c) {
  CheckResult r{"determinism"};
  const auto cfg = suite::unit_config<2>(1e-2);
  const auto lam = DirectionDensity<2>::uniform();
  const auto a = micro_triples<2>(cfg, suite::q_a(), lam, 5000, c.seed, 1);
  const auto b = micro_triples<2>(cfg, suite::q_a(), lam, 5000, c.seed, 3);
  r.expect(a == b, "micro triples identical for 1 and 3 threads");
  EstimateOptions o;
  o.seed = c.seed;
  o.threads = 1;
  const auto ka = estimate_phi<2>(cfg, suite::q_a(), 20000, 20000, o);
  o.threads = 3;
  const auto kb = estimate_phi<2>(cfg, suite::q_a(), 20000, 20000, o);
  r.expect(kernel_to_json(ka).dump() == kernel_to_json(kb).dump(), "kernel tables identical for 1 and 3 threads");
  if (c.cli.empty()) {
    r.details.push_back("skip CLI reruns (no binary given)");
    return r;
  }
  namespace fs = std::filesystem;
  fs::create_directories(c.work_dir);
  for (const auto& [cmd, text] : suite::determinism_configs()) {
    const fs::path cfg_path = c.work_dir / (cmd + ".cfg");
    {
      std::ofstream os(cfg_path, std::ios::binary);
      os << text;
    }
    std::vector<fs::path> outs;
    bool ran = true;
    for (int threads : {1, 3}) {
      const fs::path out = c.work_dir / (cmd + "_t" + std::to_string(threads));
      fs::remove_all(out);
      const std::string line = "\"" + c.cli + "\" " + cmd + " --config \"" + cfg_path.string() + "\" --seed " +
                               std::to_string(c.seed) + " --threads " + std::to_string(threads) + " --out \"" +
                               out.string() + "\" > /dev/null 2>&1";
      ran = ran && std::system(line.c_str()) == 0;
      outs.push_back(out);
    }
    std::string why;
    const bool same = ran && suite::same_files(outs[0], outs[1], why);
    r.expect(same, cmd + ": artifacts byte-identical for --threads 1 and 3" + (ran ? (same ? "" : " (" + why + ")") : " (command failed)"));
  }
  return r;
}

// ---------------------------------------------------------------------------

struct NamedCheck {
  std::string name;
  std::string criterion;
  std::function<CheckResult(SuiteContext&)> run;
};

inline const std::vector<NamedCheck>& all_checks() {
  static const std::vector<NamedCheck> checks{
      {"collision_oracle", "Collision oracle", check_collision_oracle},
      {"scattering_axioms", "Scattering axioms", check_scattering_axioms},
      {"j_factor", "J-factor", check_j_factor},
      {"liouville", "Liouville criterion", check_liouville},
      {"kernel_normalization", "Kernel normalization", check_kernel_normalization},
      {"alpha_rotation", "alpha-independence and rotation invariance", check_alpha_rotation},
      {"memory_two", "Memory-two structure", check_memory_two},
      {"exponential_closed_form", "Exponential closed-form suite", check_exponential_closed_form},
      {"fpk_residual", "FPK residual", check_fpk_residual},
      {"admissibility", "Admissibility counterexample", check_admissibility},
      {"determinism", "Determinism", check_determinism},
  };
  return checks;
}

/// Named groups of checks for `validate.suite`.
inline std::vector<std::string> suite_members(const std::string& suite) {
  if (suite == "all") {
    std::vector<std::string> out;
    for (const auto& c : all_checks()) out.push_back(c.name);
    return out;
  }
  if (suite == "exponential")
    return {"scattering_axioms", "j_factor", "exponential_closed_form", "fpk_residual"};
  if (suite == "micro")
    return {"collision_oracle", "liouville", "kernel_normalization", "alpha_rotation", "memory_two", "admissibility"};
  throw config_error("BadSuite", "unknown suite " + suite + " (all, exponential, micro)");
}

inline CheckResult run_check(const std::string& name, SuiteContext& ctx) {
  for (const auto& c : all_checks())
    if (c.name == name) {
      const auto t0 = std::chrono::steady_clock::now();
      CheckResult r;
      try {
        r = c.run(ctx);
      } catch (const std::exception& e) {
        r.name = name;
        r.expect(false, std::string("exception: ") + e.what());
      }
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      return r;
    }
  throw config_error("BadCheck", "unknown check " + name);
}

}  // namespace lorentz
