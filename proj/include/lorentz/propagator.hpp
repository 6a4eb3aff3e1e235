#pragma once

#include "lorentz/kernels.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/validation.hpp"

#include <complex>
#include <functional>
#include <memory>

namespace lorentz {

struct Estimate {
  double value = 0.0;
  double error = 0.0;
};

/// A function on the extended phase space X = {(Q, V, xi, V+)}, with optional
/// derivatives and a declared bound |f| <= j_norm * J(V, V+).
template <int D> struct PhaseDensity {
  std::function<Estimate(const ExtendedState<D>&)> eval;
  std::function<double(const ExtendedState<D>&)> d_xi;    // optional
  std::function<Vec<D>(const ExtendedState<D>&)> grad_q;  // optional
  double j_norm = 1.0;
  bool q_independent = false;
  double support_xi = std::numeric_limits<double>::infinity();  // f = 0 for xi beyond this

  double operator()(const ExtendedState<D>& s) const { return eval(s).value; }
  Estimate estimate(const ExtendedState<D>& s) const { return eval(s); }
};

template <int D>
PhaseDensity<D> make_density(std::function<double(const ExtendedState<D>&)> f, double j_norm, bool q_independent) {
  PhaseDensity<D> out;
  out.eval = [f](const ExtendedState<D>& s) { return Estimate{f(s), 0.0}; };
  out.j_norm = j_norm;
  out.q_independent = q_independent;
  return out;
}

/// f(Q, V, xi, V+) = p(V, xi, V+).
template <int D>
PhaseDensity<D> p_phase(const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k) {
  auto out = make_density<D>(
      [prof, k](const ExtendedState<D>& s) { return p_density<D>(prof, *k, s.V, s.xi, s.V_plus); }, 1.0, true);
  if (const auto* e = dynamic_cast<const ExponentialKernel<D>*>(k.get())) {
    const double sb = e->sigma_bar();
    out.d_xi = [prof, k, sb](const ExtendedState<D>& s) {
      return -sb * p_density<D>(prof, *k, s.V, s.xi, s.V_plus);
    };
  }
  return out;
}

/// Norm bound (sigma_bar t)^{n-1} / (n-1)! of K_t^(n), n >= 1.
inline double kn_norm_bound(int n, double t, int d) {
  if (n < 1) return 1.0;
  const double x = unit_ball_volume(d - 1) * t;
  if (n == 1) return 1.0;
  if (x == 0.0) return 0.0;
  return std::exp((n - 1) * std::log(x) - std::lgamma(n));
}

/// sum_{n > N} of the norm bounds, i.e. sum_{m >= N} x^m / m! with x = sigma_bar t.
inline double truncation_tail(int N, double t, int d) {
  const double x = unit_ball_volume(d - 1) * t;
  if (x == 0.0) return N == 0 ? 1.0 : 0.0;
  double term = std::exp(N * std::log(x) - std::lgamma(N + 1.0)), tail = 0.0;
  for (int m = N; m < N + 1000 && term > 1e-300; ++m) {
    tail += term;
    if (m > x && term < 1e-18 * tail) break;
    term *= x / (m + 1);
  }
  return tail;
}

/// Smallest N with truncation_tail(N) < eps.
inline int truncation_order(double t, double eps, int d) {
  if (!(eps > 0.0)) throw config_error("BadTolerance", "eps must be positive");
  for (int N = 0; N < 100000; ++N)
    if (truncation_tail(N, t, d) < eps) return N;
  throw budget_error("BudgetExceeded", "series truncation did not converge");
}

enum class Method { Quadrature, MonteCarlo };

inline Method parse_method(const std::string& s) {
  if (s == "quadrature") return Method::Quadrature;
  if (s == "monte_carlo") return Method::MonteCarlo;
  throw config_error("BadMethod", "unknown method " + s);
}

struct PropagatorOptions {
  Method method = Method::Quadrature;
  std::size_t budget = 50000000;  // integrand evaluations per point (nested) or samples (Monte Carlo)
  std::size_t mc_samples = 100000;
  int gl_nodes = 16;
  int time_panels = 4;
  int angle_panels = 4;
  int fourier_size = 64;
  std::uint64_t seed = 1;
};

/// K_t^(0) f (Q, V, xi, V+) = f(Q - tV, V, xi + t, V+).
template <int D> PhaseDensity<D> k0_apply(const PhaseDensity<D>& f, double t) {
  auto shift = [t](ExtendedState<D> s) {
    s.Q -= t * s.V;
    s.xi += t;
    return s;
  };
  PhaseDensity<D> out = f;
  out.eval = [f, shift](const ExtendedState<D>& s) { return f.eval(shift(s)); };
  if (f.d_xi) out.d_xi = [f, shift](const ExtendedState<D>& s) { return f.d_xi(shift(s)); };
  if (f.grad_q) out.grad_q = [f, shift](const ExtendedState<D>& s) { return f.grad_q(shift(s)); };
  out.support_xi = f.support_xi - t;
  return out;
}

namespace detail {

inline Vec<2> unit_at(double a) { return Vec<2>(std::cos(a), std::sin(a)); }
inline double angle_of(const Vec<2>& v) { return std::atan2(v[1], v[0]); }

// Integral over the circle of g(delta), delta the angle from a reference direction,
// split at 0, +-b and +-pi so kinks of J sit on panel ends.
template <class F> double circle_integral(F&& g, double b, int nodes, int panels) {
  double out = integrate_gl_composite(g, b, pi, nodes, panels) + integrate_gl_composite(g, -pi, -b, nodes, panels);
  if (b > 0.0) out += integrate_gl_composite(g, 0.0, b, nodes, 2) + integrate_gl_composite(g, -b, 0.0, nodes, 2);
  return out;
}

// Exponential kernel, d = 2, Q-independent f. Then
//   K_t^(n) f = J(V, V+) e^{-s(xi + t)} [Jop^{n-1} g_n](V),
//   g_n(v) = int_0^t (t - u)^{n-1} / (n-1)! e^{s u} int f(v0, u, v) dv0 du,
// with Jop g(V) = int J(v, V) g(v) dv a convolution on the circle, diagonal in Fourier space.
class ExponentialCircleChain {
 public:
  ExponentialCircleChain(const ScatteringProfile& prof, const PhaseDensity<2>& f, double t, int n_max,
                         const PropagatorOptions& o)
      : t_(t), sb_(unit_ball_volume(1)), n_max_(n_max), m_(o.fourier_size) {
    coef_ = build(prof, f, o.gl_nodes, o.time_panels, o.angle_panels);
    const auto coarse = build(prof, f, o.gl_nodes, std::max(1, o.time_panels / 2), std::max(1, o.angle_panels / 2));
    for (int m = 0; m < m_; ++m) {
      const double a = -pi + 2 * pi * m / m_;
      error_ = std::max(error_, std::abs(series(coef_.back(), a) - series(coarse.back(), a)));
    }
  }

  // [Jop^{n-1} g_n](theta) for 1 <= n <= n_max; n = 0 selects the sum over n.
  double term(int n, double theta) const { return series(n == 0 ? coef_.back() : coef_[n - 1], theta); }
  double error() const { return error_; }
  double sigma_bar() const { return sb_; }

 private:
  using Coef = std::vector<std::complex<double>>;

  // sum_k c_k e^{ik theta}, waves -m/2 .. m/2 - 1 by recurrence
  double series(const Coef& c, double theta) const {
    const std::complex<double> z = std::polar(1.0, theta);
    std::complex<double> e = std::polar(1.0, -(m_ / 2) * theta), s = 0.0;
    for (int w = -(m_ / 2); w < m_ - m_ / 2; ++w) {
      s += c[w < 0 ? w + m_ : w] * e;
      e *= z;
    }
    return s.real();
  }
  int wave(int i) const { return i < m_ / 2 ? i : i - m_; }

  // coef[n-1] for n = 1..n_max, then their sum.
  std::vector<Coef> build(const ScatteringProfile& prof, const PhaseDensity<2>& f, int nodes, int tp, int ap) const {
    const double b = prof.b_theta();
    const Vec<2> e1(1, 0);
    auto j_of = [&](double d) { return d == 0.0 ? 0.0 : jacobian_j<2>(prof, e1, unit_at(d)); };
    std::vector<std::complex<double>> jhat(m_);
    for (int i = 0; i < m_; ++i) {
      const int k = wave(i);
      const double re = circle_integral([&](double d) { return j_of(d) * std::cos(k * d); }, b, nodes, 4 * ap);
      const double im = circle_integral([&](double d) { return -j_of(d) * std::sin(k * d); }, b, nodes, 4 * ap);
      jhat[i] = {re, im};
    }
    // time nodes on [0, t]
    std::vector<double> us, ws;
    if (t_ > 0.0) {
      const double t_hi = std::min(t_, f.support_xi);
      if (t_hi > 0.0) gl_nodes_composite(0.0, t_hi, nodes, tp, us, ws);
    }
    std::vector<std::vector<double>> g(n_max_, std::vector<double>(m_, 0.0));
    for (int m = 0; m < m_; ++m) {
      const double a = -pi + 2 * pi * m / m_;
      const Vec<2> v = unit_at(a);
      for (std::size_t q = 0; q < us.size(); ++q) {
        const double u = us[q];
        const double inner = circle_integral(
            [&](double d) { return f({Vec<2>::Zero(), unit_at(a + d), u, v}); }, b, nodes, ap);
        const double base = ws[q] * std::exp(sb_ * u) * inner;
        double pw = 1.0;  // (t - u)^{n-1} / (n-1)!
        for (int n = 1; n <= n_max_; ++n) {
          g[n - 1][m] += base * pw;
          pw *= (t_ - u) / n;
        }
      }
    }
    std::vector<Coef> out(n_max_ + 1, Coef(m_, 0.0));
    for (int n = 1; n <= n_max_; ++n) {
      for (int i = 0; i < m_; ++i) {
        std::complex<double> c = 0.0;
        for (int m = 0; m < m_; ++m) c += g[n - 1][m] * std::polar(1.0, -wave(i) * (-pi + 2 * pi * m / m_));
        c /= static_cast<double>(m_);
        c *= std::pow(jhat[i], n - 1);
        out[n - 1][i] = c;
        out[n_max_][i] += c;
      }
    }
    return out;
  }

  static void gl_nodes_composite(double a, double b, int n, int panels, std::vector<double>& x,
                                 std::vector<double>& w) {
    const auto& rule = gauss_legendre(n);
    const double h = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
      const double lo = a + p * h;
      for (int i = 0; i < n; ++i) {
        x.push_back(lo + 0.5 * h * (rule.x[i] + 1.0));
        w.push_back(0.5 * h * rule.w[i]);
      }
    }
  }

  double t_, sb_;
  int n_max_, m_;
  std::vector<Coef> coef_;
  double error_ = 0.0;
};

// Direct nested Gauss-Legendre evaluation of the n-collision integral in d = 2.
// Velocities are integrated as angles relative to the next one, times over the simplex
// T_n <= t by nested variable limits.
inline Estimate kn_nested_d2(const ScatteringProfile& prof, const KernelBackend<2>& k, const PhaseDensity<2>& f,
                             double t, int n, const ExtendedState<2>& at, const PropagatorOptions& o) {
  const int nodes = o.gl_nodes;
  const double per_level = (2.0 * nodes * o.angle_panels + (prof.b_theta() > 0.0 ? 4.0 * nodes : 0.0)) * (2.0 * nodes);
  if (std::pow(per_level, n) > static_cast<double>(o.budget))
    throw budget_error("BudgetExceeded", "nested quadrature exceeds the evaluation budget");
  std::vector<Vec<2>> v(n + 2);
  std::vector<double> xi(n + 2);
  v[n] = at.V;
  v[n + 1] = at.V_plus;
  const double b = prof.b_theta();
  std::function<double(int, double)> level = [&](int j, double remaining) -> double {
    if (j == 0) {
      const double T = t - remaining;
      xi[n + 1] = at.xi + t - T;
      Vec<2> x = (t - T) * v[n];
      for (int i = 1; i <= n; ++i) x += xi[i] * v[i - 1];
      double val = f({Vec<2>(at.Q - x), v[0], xi[1], v[1]});
      for (int i = 1; i <= n && val != 0.0; ++i) val *= p_plus_density<2>(prof, k, v[i - 1], v[i], xi[i + 1], v[i + 1]);
      return val;
    }
    const double base = angle_of(v[j]);
    auto over_xi = [&](double d) {
      v[j - 1] = unit_at(base + d);
      return integrate_gl_composite(
          [&](double x) {
            xi[j] = x;
            return level(j - 1, remaining - x);
          },
          0.0, remaining, nodes, 2);
    };
    return circle_integral(over_xi, b, nodes, o.angle_panels);
  };
  return {level(n, t), 0.0};
}

// Backward importance sampling: v_{j-1} is drawn with density J(v_{j-1}, v_j) / sigma_bar
// (the mirror image of a forward exit direction), times by sorted uniforms.
template <int D>
Estimate kn_monte_carlo(const ScatteringProfile& prof, const KernelBackend<D>& k, const PhaseDensity<D>& f, double t,
                        int n, const ExtendedState<D>& at, const PropagatorOptions& o) {
  if (o.mc_samples > o.budget) throw budget_error("BudgetExceeded", "Monte Carlo samples exceed the budget");
  const double sb = unit_ball_volume(D - 1);
  const double scale = std::exp(n * std::log(sb * t) - std::lgamma(n + 1.0));
  std::vector<Vec<D>> v(n + 2);
  std::vector<double> xi(n + 2), T(n);
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < o.mc_samples; ++i) {
    Rng rng(o.seed, i);
    for (int j = 0; j < n; ++j) T[j] = t * rng.uniform();
    std::sort(T.begin(), T.end());
    v[n] = at.V;
    v[n + 1] = at.V_plus;
    double weight = 1.0;
    for (int j = n; j >= 1; --j) {
      const Vec<D> u = exit_direction<D>(prof, v[j], rng.in_ball<D - 1>());
      v[j - 1] = Vec<D>(2.0 * v[j].dot(u) * v[j] - u).normalized();
      const double jj = jacobian_j<D>(prof, v[j - 1], v[j]);
      if (!(jj > 0.0)) {
        weight = 0.0;
        break;
      }
      weight /= jj;
    }
    double val = 0.0;
    if (weight != 0.0) {
      for (int j = 1; j <= n; ++j) xi[j] = T[j - 1] - (j > 1 ? T[j - 2] : 0.0);
      xi[n + 1] = at.xi + t - T[n - 1];
      Vec<D> x = (t - T[n - 1]) * v[n];
      for (int j = 1; j <= n; ++j) x += xi[j] * v[j - 1];
      val = f({Vec<D>(at.Q - x), v[0], xi[1], v[1]});
      for (int j = 1; j <= n && val != 0.0; ++j) val *= p_plus_density<D>(prof, k, v[j - 1], v[j], xi[j + 1], v[j + 1]);
      val *= weight * scale;
    }
    s1 += val;
    s2 += val * val;
  }
  const double m = s1 / o.mc_samples;
  const double var = std::max(0.0, s2 / o.mc_samples - m * m);
  return {m, std::sqrt(var / o.mc_samples)};
}

template <int D> bool exponential_circle_case(const KernelBackend<D>& k, const PhaseDensity<D>& f) {
  if constexpr (D == 2) {
    return dynamic_cast<const ExponentialKernel<2>*>(&k) != nullptr && f.q_independent;
  }
  return false;
}

}  // namespace detail

/// K_t^(n) f for n >= 1, as an evaluator with an error estimate.
/// Quadrature is available in d = 2 only.
template <int D>
PhaseDensity<D> kn_apply(const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k,
                         const PhaseDensity<D>& f, double t, int n, const PropagatorOptions& o = {}) {
  if (n < 1) throw config_error("BadOrder", "kn_apply needs n >= 1");
  if (!(t >= 0.0)) throw config_error("BadTime", "t must be nonnegative");
  PhaseDensity<D> out;
  out.j_norm = f.j_norm * kn_norm_bound(n, t, D);
  out.q_independent = f.q_independent;
  if (t == 0.0) {
    out.eval = [](const ExtendedState<D>&) { return Estimate{}; };
    return out;
  }
  if (o.method == Method::MonteCarlo) {
    out.eval = [prof, k, f, t, n, o](const ExtendedState<D>& s) {
      return detail::kn_monte_carlo<D>(prof, *k, f, t, n, s, o);
    };
    return out;
  }
  if constexpr (D != 2) {
    throw config_error("QuadratureUnsupported", "quadrature evaluation of K_t^(n) is implemented for d = 2");
  } else {
    if (detail::exponential_circle_case<2>(*k, f)) {
      auto chain = std::make_shared<const detail::ExponentialCircleChain>(prof, f, t, n, o);
      out.eval = [prof, chain, t, n](const ExtendedState<2>& s) {
        const double pre = jacobian_j<2>(prof, s.V, s.V_plus) * std::exp(-chain->sigma_bar() * (s.xi + t));
        return Estimate{pre * chain->term(n, detail::angle_of(s.V)), pre * chain->error()};
      };
      out.d_xi = [prof, chain, t, n](const ExtendedState<2>& s) {
        const double sb = chain->sigma_bar();
        return -sb * jacobian_j<2>(prof, s.V, s.V_plus) * std::exp(-sb * (s.xi + t)) *
               chain->term(n, detail::angle_of(s.V));
      };
      return out;
    }
    out.eval = [prof, k, f, t, n, o](const ExtendedState<2>& s) {
      return detail::kn_nested_d2(prof, *k, f, t, n, s, o);
    };
    return out;
  }
}

template <int D> struct KtResult {
  PhaseDensity<D> density;
  int order = 0;            // N: terms n = 0..N are summed
  double truncation = 0.0;  // norm-bound tail of the omitted terms, times ||f||_J
};

/// K_t f = sum_{n <= N} K_t^(n) f with N chosen so the norm-bound tail is below eps ||f||_J.
template <int D>
KtResult<D> kt_apply(const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k,
                     const PhaseDensity<D>& f, double t, double eps, const PropagatorOptions& o = {}) {
  if (!(t >= 0.0)) throw config_error("BadTime", "t must be nonnegative");
  KtResult<D> r;
  r.order = std::max(1, truncation_order(t, eps, D));
  r.truncation = t == 0.0 ? 0.0 : f.j_norm * truncation_tail(r.order, t, D);
  const auto k0 = k0_apply<D>(f, t);
  auto& out = r.density;
  out.j_norm = f.j_norm;
  out.q_independent = f.q_independent;
  const double trunc = r.truncation;
  if (t == 0.0) {
    out = f;
    return r;
  }
  bool circle = false;
  if constexpr (D == 2) circle = o.method == Method::Quadrature && detail::exponential_circle_case<2>(*k, f);
  if (circle) {
    if constexpr (D == 2) {
      auto chain = std::make_shared<const detail::ExponentialCircleChain>(prof, f, t, r.order, o);
      out.eval = [prof, chain, t, k0, trunc](const ExtendedState<2>& s) {
        const double jj = jacobian_j<2>(prof, s.V, s.V_plus);
        const double pre = jj * std::exp(-chain->sigma_bar() * (s.xi + t));
        const auto e0 = k0.eval(s);
        return Estimate{e0.value + pre * chain->term(0, detail::angle_of(s.V)),
                        e0.error + pre * chain->error() + jj * trunc};
      };
      if (f.d_xi) {
        out.d_xi = [prof, chain, t, k0](const ExtendedState<2>& s) {
          const double sb = chain->sigma_bar();
          return k0.d_xi(s) - sb * jacobian_j<2>(prof, s.V, s.V_plus) * std::exp(-sb * (s.xi + t)) *
                                  chain->term(0, detail::angle_of(s.V));
        };
      }
    }
    return r;
  }
  std::vector<PhaseDensity<D>> terms;
  for (int n = 1; n <= r.order; ++n) terms.push_back(kn_apply<D>(prof, k, f, t, n, o));
  out.eval = [terms, k0, trunc, prof](const ExtendedState<D>& s) {
    Estimate e = k0.eval(s);
    double var = 0.0;
    for (const auto& term : terms) {
      const auto x = term.eval(s);
      e.value += x.value;
      var += x.error * x.error;
    }
    e.error += std::sqrt(var) + trunc * jacobian_j<D>(prof, s.V, s.V_plus);
    return e;
  };
  return r;
}

/// [Zg] = (d/dxi - V . grad_Q) g + int g(Q, v0, 0, V) p_{0, beta+_{v0}}(V, xi, V+) dv0.
/// Derivatives are analytic when g declares them, central differences with step h otherwise.
template <int D>
double z_apply(const ScatteringProfile& prof, const KernelBackend<D>& k, const PhaseDensity<D>& g,
               const ExtendedState<D>& s, double h = 1e-4) {
  double dxi;
  if (g.d_xi) {
    dxi = g.d_xi(s);
  } else {
    auto at = [&](double x) {
      auto u = s;
      u.xi = x;
      return g(u);
    };
    dxi = s.xi >= h ? (at(s.xi + h) - at(s.xi - h)) / (2 * h)
                    : (-3 * at(s.xi) + 4 * at(s.xi + h) - at(s.xi + 2 * h)) / (2 * h);
  }
  double transport = 0.0;
  if (!g.q_independent) {
    if (g.grad_q) {
      transport = s.V.dot(g.grad_q(s));
    } else {
      auto a = s, b = s;
      a.Q += h * s.V;
      b.Q -= h * s.V;
      transport = (g(a) - g(b)) / (2 * h);
    }
  }
  const double gain = integrate_sphere<D>(
      [&](const Vec<D>& v0) {
        const double pp = p_plus_density<D>(prof, k, v0, s.V, s.xi, s.V_plus);
        return pp == 0.0 ? 0.0 : g({s.Q, v0, 0.0, s.V}) * pp;
      },
      s.V, prof.b_theta(), 16, D == 2 ? 64 : 32, 16);
  return dxi - transport + gain;
}

struct FpkResidual {
  double value = 0.0;
  double tolerance = 0.0;
  double derivative = 0.0;  // d/dt K_t f0
  double generator = 0.0;   // Z K_t f0
  int order = 0;
  bool pass() const { return value <= tolerance; }
};

/// |d/dt (K_t f0) - Z (K_t f0)| at each point; d/dt by central differences with step
/// 1e-3 max(1, t), one-sided second order near t = 0. The tolerance combines the
/// Richardson estimate of the difference quotient with the evaluators' error estimates.
template <int D>
std::vector<FpkResidual> fpk_residuals(const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k,
                                       const PhaseDensity<D>& f0, double t, const std::vector<ExtendedState<D>>& pts,
                                       double eps = 1e-12, const PropagatorOptions& o = {}) {
  const double h = 1e-3 * std::max(1.0, t);
  auto kt = [&](double tt) { return kt_apply<D>(prof, k, f0, tt, eps, o); };
  const auto base = kt(t);
  const bool central = t >= 2 * h;
  std::vector<KtResult<D>> side;
  for (double x : central ? std::vector<double>{t + h, t - h, t + 2 * h, t - 2 * h}
                          : std::vector<double>{t + h, t + 2 * h, t + 4 * h})
    side.push_back(kt(x));
  const double sb = unit_ball_volume(D - 1);
  std::vector<FpkResidual> out;
  for (const auto& s : pts) {
    FpkResidual r;
    r.order = base.order;
    const auto c = base.density.estimate(s);
    std::vector<Estimate> e;
    for (const auto& x : side) e.push_back(x.density.estimate(s));
    double d1, d2, err_k;
    if (central) {
      d1 = (e[0].value - e[1].value) / (2 * h);
      d2 = (e[2].value - e[3].value) / (4 * h);
      err_k = (e[0].error + e[1].error) / (2 * h);
    } else {
      d1 = (-3 * c.value + 4 * e[0].value - e[1].value) / (2 * h);
      d2 = (-3 * c.value + 4 * e[1].value - e[2].value) / (4 * h);
      err_k = (3 * c.error + 4 * e[0].error + e[1].error) / (2 * h);
    }
    r.derivative = d1;
    r.generator = z_apply<D>(prof, *k, base.density, s);
    r.value = std::abs(d1 - r.generator);
    r.tolerance = std::abs(d1 - d2) + err_k + (1.0 + sb) * c.error + 1e-9;
    out.push_back(r);
  }
  return out;
}

template <int D>
FpkResidual fpk_residual(const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k,
                         const PhaseDensity<D>& f0, double t, const ExtendedState<D>& s, double eps = 1e-12,
                         const PropagatorOptions& o = {}) {
  return fpk_residuals<D>(prof, k, f0, t, {s}, eps, o)[0];
}

/// Points of the extended phase space with J(V, V+) > 0: Q standard normal, V and
/// V+ uniform, xi uniform on [0, xi_max).
template <int D>
std::vector<ExtendedState<D>> phase_grid(const ScatteringProfile& prof, int n, std::uint64_t seed,
                                         double xi_max = 2.0) {
  Rng rng(seed, 0);
  std::vector<ExtendedState<D>> out;
  while (static_cast<int>(out.size()) < n) {
    ExtendedState<D> s;
    for (int i = 0; i < D; ++i) s.Q[i] = rng.normal();
    s.V = rng.unit_vector<D>();
    s.V_plus = rng.unit_vector<D>();
    s.xi = rng.uniform(0.0, xi_max);
    if (jacobian_j<D>(prof, s.V, s.V_plus) > 0.0) out.push_back(s);
  }
  return out;
}

/// f = J(V, V+) b(xi) (1 + V_1 / 2) with b(x) = exp(-1 / (1 - u^2)), u = (x - 1) / 0.9:
/// smooth, supported in xi on (0.1, 1.9), independent of Q.
template <int D> PhaseDensity<D> bump_density(const ScatteringProfile& prof) {
  auto b = [](double x) {
    const double u = (x - 1.0) / 0.9;
    return std::abs(u) < 1.0 ? std::exp(-1.0 / (1.0 - u * u)) : 0.0;
  };
  auto db = [b](double x) {
    const double u = (x - 1.0) / 0.9;
    return std::abs(u) < 1.0 ? b(x) * (-2.0 * u / ((1.0 - u * u) * (1.0 - u * u))) / 0.9 : 0.0;
  };
  auto f = make_density<D>(
      [prof, b](const ExtendedState<D>& s) { return jacobian_j<D>(prof, s.V, s.V_plus) * b(s.xi) * (1.0 + 0.5 * s.V[0]); },
      1.5 * std::exp(-1.0), true);
  f.d_xi = [prof, db](const ExtendedState<D>& s) {
    return jacobian_j<D>(prof, s.V, s.V_plus) * db(s.xi) * (1.0 + 0.5 * s.V[0]);
  };
  f.support_xi = 1.9;
  return f;
}

/// Marginal propagator: [L_t fbar](Q, V) = int int K_t[fbar p](Q, V, xi, V+) dxi dV+.
/// The xi integral is truncated at xi_max.
template <int D>
std::function<Estimate(const Vec<D>&, const Vec<D>&)> lt_apply(
    const ScatteringProfile& prof, std::shared_ptr<const KernelBackend<D>> k,
    std::function<double(const Vec<D>&, const Vec<D>&)> fbar, bool q_independent, double t, double eps,
    const PropagatorOptions& o = {}, double xi_max = 20.0) {
  auto lifted = make_density<D>(
      [prof, k, fbar](const ExtendedState<D>& s) {
        const double a = fbar(s.Q, s.V);
        return a == 0.0 ? 0.0 : a * p_density<D>(prof, *k, s.V, s.xi, s.V_plus);
      },
      1.0, q_independent);
  const auto kt = std::make_shared<const KtResult<D>>(kt_apply<D>(prof, k, lifted, t, eps, o));
  return [prof, kt, xi_max](const Vec<D>& q, const Vec<D>& v) {
    auto integral = [&](auto&& part) {
      return integrate_sphere<D>(
          [&](const Vec<D>& vp) {
            return integrate_gl_composite([&](double x) { return part(kt->density.estimate({q, v, x, vp})); }, 0.0,
                                          xi_max, 16, 8);
          },
          v, prof.b_theta(), 16, D == 2 ? 64 : 32, 8);
    };
    return Estimate{integral([](const Estimate& e) { return e.value; }),
                    integral([](const Estimate& e) { return e.error; })};
  };
}

/// Defect of the semigroup property for L_t, measured by simulation: the law of
/// (Q, V) at time s + t started from fbar p, against the law obtained by stopping at
/// s, forgetting (xi, V+), re-lifting with p(V, ., .) and running for t more.
/// The histogram L1 distance is reported together with a homogeneity chi-square.
template <int D>
ComparisonReport lt_semigroup_defect(const PhaseLaw<D>& law, const ScatteringProfile& prof,
                                     const KernelBackend<D>& k, double s, double t, std::size_t n, int n_angle,
                                     int n_radius, std::uint64_t seed, unsigned threads) {
  auto run = [&](bool restart) {
    const auto parts = parallel_blocks(n, 1024, threads, [&](std::size_t b, std::size_t e) {
      std::vector<std::pair<Vec<D>, Vec<D>>> out;
      for (std::size_t i = b; i < e; ++i) {
        Rng rng(seed, 2 * i + (restart ? 1 : 0));
        auto x = sample_extended_initial<D>(law, prof, k, rng);
        if (restart) {
          x = simulate_xhat<D>(x, prof, k, {s}, rng)[0];
          x.xi = k.sample_xi(Source::Generic, Perp<D>::Zero(), rng);
          x.V_plus = detail::exit_direction<D>(prof, x.V, k.sample_w(Source::Generic, x.xi, Perp<D>::Zero(), rng));
          x = simulate_xhat<D>(x, prof, k, {t}, rng)[0];
        } else {
          x = simulate_xhat<D>(x, prof, k, {s + t}, rng)[0];
        }
        out.push_back({x.Q, x.V});
      }
      return out;
    });
    std::vector<std::pair<Vec<D>, Vec<D>>> all;
    for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
    return all;
  };
  const auto a = run(false), b = run(true);
  std::vector<double> radii;
  for (const auto& x : a) radii.push_back((x.first - law.mean).norm());
  const auto edges = detail::quantile_edges(radii, n_radius);
  auto bin = [&](const std::pair<Vec<D>, Vec<D>>& x) {
    const int r = detail::bin_of(edges, (x.first - law.mean).norm());
    const Vec<D> ax = law.lambda.kind() == DirectionDensity<D>::Kind::Uniform ? basis_vector<D>(0)
                                                                               : law.lambda.axis();
    const double c = std::clamp(x.second.dot(ax), -1.0, 1.0);
    const int g = std::min(n_angle - 1, static_cast<int>(std::acos(c) / pi * n_angle));
    return r * n_angle + g;
  };
  std::vector<int> ba, bb;
  for (const auto& x : a) ba.push_back(bin(x));
  for (const auto& x : b) bb.push_back(bin(x));
  auto r = chi_square_homogeneity(ba, bb, n_angle * n_radius);
  std::vector<double> ha(n_angle * n_radius, 0.0), hb(ha);
  for (int x : ba) ha[x] += 1.0 / n;
  for (int x : bb) hb[x] += 1.0 / n;
  double l1 = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i) l1 += std::abs(ha[i] - hb[i]);
  r.name = "lt_semigroup_defect";
  r.note = "L1 histogram distance " + std::to_string(l1) + "; no target value";
  r.value = l1;
  r.statistic = "L1";
  return r;
}

}  // namespace lorentz
