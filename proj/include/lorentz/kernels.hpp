#pragma once

#include "lorentz/directions.hpp"
#include "lorentz/errors.hpp"
#include "lorentz/lattice.hpp"
#include "lorentz/microsim.hpp"
#include "lorentz/parallel.hpp"
#include "lorentz/quadrature.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/rotation.hpp"
#include "lorentz/scattering.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lorentz {

/// Which limiting kernel is meant: Generic is Phi_alpha for irrational alpha (no
/// offset), Lattice is Phi_0 for a flight leaving a scatterer with exit offset z.
enum class Source { Generic, Lattice };

/// Limiting collision kernel Phi(xi, w, z): a probability density in (xi, w) on
/// R_{>0} x B_1^{d-1} for each fixed z, with Phi(0, w, z) = 1.
template <int D> class KernelBackend {
 public:
  virtual ~KernelBackend() = default;
  virtual std::string name() const = 0;
  virtual double phi(Source s, double xi, const Perp<D>& w, const Perp<D>& z) const = 0;
  /// xi-marginal: integral of Phi(xi, w, z) over w.
  virtual double marginal(Source s, double xi, const Perp<D>& z) const = 0;
  /// Integral of the marginal over (xi, infinity).
  virtual double survival(Source s, double xi, const Perp<D>& z) const = 0;
  virtual double sample_xi(Source s, const Perp<D>& z, Rng& rng) const = 0;
  /// Draw w from Phi(xi, ., z) normalized over the ball.
  virtual Perp<D> sample_w(Source s, double xi, const Perp<D>& z, Rng& rng) const = 0;
};

/// Memoryless comparison kernel Phi = exp(-sigma_bar xi), sigma_bar = vol(B_1^{d-1}).
template <int D> class ExponentialKernel final : public KernelBackend<D> {
 public:
  double sigma_bar() const { return unit_ball_volume(D - 1); }
  std::string name() const override { return "exponential"; }
  double phi(Source, double xi, const Perp<D>&, const Perp<D>&) const override {
    return xi <= 0.0 ? 1.0 : std::exp(-sigma_bar() * xi);
  }
  double marginal(Source, double xi, const Perp<D>&) const override {
    return xi < 0.0 ? 0.0 : sigma_bar() * std::exp(-sigma_bar() * xi);
  }
  double survival(Source, double xi, const Perp<D>&) const override {
    return xi <= 0.0 ? 1.0 : std::exp(-sigma_bar() * xi);
  }
  double sample_xi(Source, const Perp<D>&, Rng& rng) const override { return rng.exponential(sigma_bar()); }
  Perp<D> sample_w(Source, double, const Perp<D>&, Rng& rng) const override { return rng.in_ball<D - 1>(); }
};

/// Binning of an empirical kernel. xi uses n_xi equal bins on [0, xi_max) plus an
/// exponential tail; |w| and |z| use equal bins on [0, 1); the relative angle uses
/// n_c equal bins of cos angle(w, z) on [-1, 1] for d = 3 and the sign of w z for d = 2.
struct KernelBins {
  double xi_max = 6.0;
  int n_xi = 60;
  int n_w = 10;
  int n_z = 5;
  int n_c = 4;
};

namespace detail {

inline std::vector<double> uniform_edges(double a, double b, int n) {
  std::vector<double> e(n + 1);
  for (int i = 0; i <= n; ++i) e[i] = a + (b - a) * i / n;
  e[n] = b;
  return e;
}

// Index of the bin [e_i, e_{i+1}) containing x, clamped to the valid range.
inline int bin_of(const std::vector<double>& e, double x) {
  const auto it = std::upper_bound(e.begin(), e.end(), x);
  const int i = static_cast<int>(it - e.begin()) - 1;
  return std::clamp(i, 0, static_cast<int>(e.size()) - 2);
}

// Volume of {w in B^{d-1} : r1 <= |w| < r2} (d = 2 counts both signs).
template <int D> double shell_volume(double r1, double r2) {
  if constexpr (D == 2) {
    return 2.0 * (r2 - r1);
  } else {
    return pi * (r2 * r2 - r1 * r1);
  }
}

// Volume of one (|w|, relative-angle) cell around a fixed direction of z.
template <int D> double cell_volume(double r1, double r2, double c1, double c2) {
  if constexpr (D == 2) {
    (void)c1;
    (void)c2;
    return r2 - r1;
  } else {
    return (r2 * r2 - r1 * r1) * (std::acos(c1) - std::acos(c2));
  }
}

// Relative-angle coordinate of w with respect to z: cos angle (d = 3), sign (d = 2).
template <int D> double relative_c(const Perp<D>& w, const Perp<D>& z) {
  if constexpr (D == 2) {
    return w[0] * z[0] >= 0.0 ? 1.0 : -1.0;
  } else {
    const double nw = w.norm(), nz = z.norm();
    if (nw == 0.0 || nz == 0.0) return 1.0;
    return std::clamp(w.dot(z) / (nw * nz), -1.0, 1.0);
  }
}

// Uniform draw of |w| in [r1, r2) w.r.t. the volume measure of B^{d-1}.
template <int D> double sample_radius(double r1, double r2, Rng& rng) {
  if constexpr (D == 2) {
    return rng.uniform(r1, r2);
  } else {
    return std::sqrt(rng.uniform(r1 * r1, r2 * r2));
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string round_trip(double x) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

// Choose an index with probability proportional to weights[i] (all >= 0, sum > 0).
inline std::size_t pick(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

}  // namespace detail

/// Hash identifying a lattice basis (FNV-1a over the round-trip decimal entries).
template <int D> std::string lattice_hash(const Lattice<D>& lat) {
  std::string s;
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) s += detail::round_trip(lat.basis(i, j)) + ";";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(s)));
  return buf;
}

/// Histogram of (xi, |w|) for the Generic source.
struct GenericTable {
  std::vector<double> xi_edges, w_edges;
  std::vector<std::uint64_t> counts;  // [xi][w]
  std::uint64_t sample_count = 0;
  std::uint64_t tail_count = 0;   // xi_max <= xi < xi_cut
  double tail_log_sum = 0.0;      // sum of log(xi / xi_max) over the tail
  std::uint64_t censored = 0;     // no collision before xi_cut

  int n_xi() const { return static_cast<int>(xi_edges.size()) - 1; }
  int n_w() const { return static_cast<int>(w_edges.size()) - 1; }
  std::uint64_t& at(int i, int j) { return counts[static_cast<std::size_t>(i) * n_w() + j]; }
  std::uint64_t at(int i, int j) const { return counts[static_cast<std::size_t>(i) * n_w() + j]; }
  void merge(const GenericTable& o) {
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += o.counts[k];
    sample_count += o.sample_count;
    tail_count += o.tail_count;
    tail_log_sum += o.tail_log_sum;
    censored += o.censored;
  }
  bool operator==(const GenericTable&) const = default;
};

/// Histogram of (xi, |w|, relative angle) for each |z| bin, for the Lattice source.
struct OffsetTable {
  std::vector<double> xi_edges, z_edges, w_edges, c_edges;
  std::vector<std::uint64_t> counts;  // [z][xi][w][c]
  std::vector<std::uint64_t> sample_count, tail_count, censored;  // per z bin
  std::vector<double> tail_log_sum;

  int n_xi() const { return static_cast<int>(xi_edges.size()) - 1; }
  int n_z() const { return static_cast<int>(z_edges.size()) - 1; }
  int n_w() const { return static_cast<int>(w_edges.size()) - 1; }
  int n_c() const { return static_cast<int>(c_edges.size()) - 1; }
  std::size_t index(int z, int i, int j, int c) const {
    return ((static_cast<std::size_t>(z) * n_xi() + i) * n_w() + j) * n_c() + c;
  }
  void merge(const OffsetTable& o) {
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += o.counts[k];
    for (int z = 0; z < n_z(); ++z) {
      sample_count[z] += o.sample_count[z];
      tail_count[z] += o.tail_count[z];
      censored[z] += o.censored[z];
      tail_log_sum[z] += o.tail_log_sum[z];
    }
  }
  bool operator==(const OffsetTable&) const = default;
};

template <int D> GenericTable empty_generic_table(const KernelBins& b) {
  GenericTable t;
  t.xi_edges = detail::uniform_edges(0.0, b.xi_max, b.n_xi);
  t.w_edges = detail::uniform_edges(0.0, 1.0, b.n_w);
  t.counts.assign(static_cast<std::size_t>(b.n_xi) * b.n_w, 0);
  return t;
}

template <int D> OffsetTable empty_offset_table(const KernelBins& b) {
  OffsetTable t;
  t.xi_edges = detail::uniform_edges(0.0, b.xi_max, b.n_xi);
  t.z_edges = detail::uniform_edges(0.0, 1.0, b.n_z);
  t.w_edges = detail::uniform_edges(0.0, 1.0, b.n_w);
  t.c_edges = D == 2 ? std::vector<double>{-1.0, 0.0, 1.0} : detail::uniform_edges(-1.0, 1.0, b.n_c);
  t.counts.assign(static_cast<std::size_t>(b.n_z) * b.n_xi * b.n_w * t.n_c(), 0);
  t.sample_count.assign(b.n_z, 0);
  t.tail_count.assign(b.n_z, 0);
  t.censored.assign(b.n_z, 0);
  t.tail_log_sum.assign(b.n_z, 0.0);
  return t;
}

/// Empirical kernel estimated from the billiard at small rho. Within a bin Phi is
/// constant; beyond xi_max the xi-marginal is a Pareto tail, uniform in w, holding
/// the tail and censored samples. Its exponent is the censored maximum-likelihood
/// estimate (free path tails are algebraic, not exponential). Phi(0, ., .) := 1.
template <int D> class EmpiricalKernel final : public KernelBackend<D> {
 public:
  std::optional<GenericTable> generic;
  std::optional<OffsetTable> offset;
  double rho = 0.0;
  double xi_cut = 0.0;  // rescaled flight cutoff used during estimation
  std::string lattice_id;
  Vec<D> base_point = Vec<D>::Zero();

  std::string name() const override { return "empirical"; }

  double phi(Source s, double xi, const Perp<D>& w, const Perp<D>& z) const override {
    if (xi <= 0.0) return 1.0;
    if (s == Source::Generic) {
      const auto& t = need_generic();
      const double n = static_cast<double>(t.sample_count);
      if (xi >= t.xi_edges.back())
        return tail_marginal(tail_of(t.tail_count, t.censored, t.tail_log_sum, t.xi_edges.back()), n, xi) /
               unit_ball_volume(D - 1);
      const int i = detail::bin_of(t.xi_edges, xi), j = detail::bin_of(t.w_edges, w.norm());
      const double vol = detail::shell_volume<D>(t.w_edges[j], t.w_edges[j + 1]);
      return static_cast<double>(t.at(i, j)) / (n * (t.xi_edges[i + 1] - t.xi_edges[i]) * vol);
    }
    const auto& t = need_offset();
    const int zb = detail::bin_of(t.z_edges, z.norm());
    const double n = static_cast<double>(t.sample_count[zb]);
    if (n == 0.0) throw Error(ErrorKind::Validation, "DegenerateKernel", "empty z bin");
    if (xi >= t.xi_edges.back())
      return tail_marginal(tail_of(t.tail_count[zb], t.censored[zb], t.tail_log_sum[zb], t.xi_edges.back()), n, xi) /
             unit_ball_volume(D - 1);
    const int i = detail::bin_of(t.xi_edges, xi), j = detail::bin_of(t.w_edges, w.norm());
    const int c = detail::bin_of(t.c_edges, detail::relative_c<D>(w, z));
    const double vol = detail::cell_volume<D>(t.w_edges[j], t.w_edges[j + 1], t.c_edges[c], t.c_edges[c + 1]);
    return static_cast<double>(t.counts[t.index(zb, i, j, c)]) / (n * (t.xi_edges[i + 1] - t.xi_edges[i]) * vol);
  }

  double marginal(Source s, double xi, const Perp<D>& z) const override {
    if (xi < 0.0) return 0.0;
    const auto m = masses(s, z);
    const auto& e = m.xi_edges;
    if (xi >= e.back()) return tail_marginal(m.tail, m.n, xi);
    const int i = detail::bin_of(e, xi);
    return m.bins[i] / (m.n * (e[i + 1] - e[i]));
  }

  double survival(Source s, double xi, const Perp<D>& z) const override {
    const auto m = masses(s, z);
    const auto& e = m.xi_edges;
    if (xi >= e.back()) return m.tail.mass / m.n * std::pow(m.tail.x0 / xi, m.tail.exponent);
    xi = std::max(xi, 0.0);
    const int i = detail::bin_of(e, xi);
    double acc = m.bins[i] * (e[i + 1] - xi) / (e[i + 1] - e[i]);
    for (std::size_t k = i + 1; k < m.bins.size(); ++k) acc += m.bins[k];
    return (acc + m.tail.mass) / m.n;
  }

  double sample_xi(Source s, const Perp<D>& z, Rng& rng) const override {
    const auto m = masses(s, z);
    std::vector<double> cum(m.bins.size() + 1);
    std::partial_sum(m.bins.begin(), m.bins.end(), cum.begin());
    cum.back() = cum[m.bins.size() - 1] + m.tail.mass;
    if (!(cum.back() > 0.0)) throw Error(ErrorKind::Validation, "DegenerateKernel", "kernel table has no samples");
    const std::size_t k = detail::pick(cum, rng);
    const auto& e = m.xi_edges;
    if (k == m.bins.size()) return m.tail.x0 * std::pow(rng.uniform(), -1.0 / m.tail.exponent);
    return rng.uniform(e[k], e[k + 1]);
  }

  Perp<D> sample_w(Source s, double xi, const Perp<D>& z, Rng& rng) const override {
    if (s == Source::Generic) {
      const auto& t = need_generic();
      if (xi >= t.xi_edges.back()) return rng.in_ball<D - 1>();
      const int i = detail::bin_of(t.xi_edges, xi);
      std::vector<double> cum(t.n_w());
      double acc = 0.0;
      for (int j = 0; j < t.n_w(); ++j) cum[j] = acc += static_cast<double>(t.at(i, j));
      if (!(acc > 0.0)) throw Error(ErrorKind::Validation, "DegenerateKernel", "empty xi bin");
      const std::size_t j = detail::pick(cum, rng);
      const double r = detail::sample_radius<D>(t.w_edges[j], t.w_edges[j + 1], rng);
      return r * random_direction(rng);
    }
    const auto& t = need_offset();
    if (xi >= t.xi_edges.back()) return rng.in_ball<D - 1>();
    const int zb = detail::bin_of(t.z_edges, z.norm());
    const int i = detail::bin_of(t.xi_edges, xi);
    const int nc = t.n_c();
    std::vector<double> cum(static_cast<std::size_t>(t.n_w()) * nc);
    double acc = 0.0;
    for (int j = 0; j < t.n_w(); ++j)
      for (int c = 0; c < nc; ++c) cum[j * nc + c] = acc += static_cast<double>(t.counts[t.index(zb, i, j, c)]);
    if (!(acc > 0.0)) throw Error(ErrorKind::Validation, "DegenerateKernel", "empty xi bin");
    const std::size_t k = detail::pick(cum, rng);
    const int j = static_cast<int>(k) / nc, c = static_cast<int>(k) % nc;
    const double r = detail::sample_radius<D>(t.w_edges[j], t.w_edges[j + 1], rng);
    const double nz = z.norm();
    if constexpr (D == 2) {
      const double zs = nz > 0.0 ? (z[0] > 0 ? 1.0 : -1.0) : 1.0;
      Perp<D> w;
      w[0] = (c == 1 ? 1.0 : -1.0) * zs * r;
      return w;
    } else {
      // angle from z uniform in the cell (area element r dr dtheta), either side of z
      const double th = rng.uniform(std::acos(t.c_edges[c + 1]), std::acos(t.c_edges[c]));
      const Perp<D> e = nz > 0.0 ? Perp<D>(z / nz) : Perp<D>(1.0, 0.0);
      const Perp<D> f(-e[1], e[0]);
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      return r * (std::cos(th) * e + side * std::sin(th) * f);
    }
  }

  const GenericTable& need_generic() const {
    if (!generic) throw config_error("MissingTable", "kernel has no generic (irrational base point) table");
    return *generic;
  }
  const OffsetTable& need_offset() const {
    if (!offset) throw config_error("MissingTable", "kernel has no offset (lattice source) table");
    return *offset;
  }

  /// Integral of Phi over (xi, w) for the generic table (1 up to rounding).
  double generic_normalization() const {
    const auto& t = need_generic();
    double s = 0.0;
    for (auto c : t.counts) s += static_cast<double>(c);
    return (s + static_cast<double>(t.tail_count + t.censored)) / static_cast<double>(t.sample_count);
  }

  /// Number of samples behind the value phi(s, xi, w, z): the cell count, or the
  /// tail mass beyond xi_max. Its inverse square root is the relative standard error.
  double cell_count(Source s, double xi, const Perp<D>& w, const Perp<D>& z) const {
    if (s == Source::Generic) {
      const auto& t = need_generic();
      if (xi >= t.xi_edges.back()) return static_cast<double>(t.tail_count + t.censored);
      return static_cast<double>(t.at(detail::bin_of(t.xi_edges, std::max(xi, 0.0)), detail::bin_of(t.w_edges, w.norm())));
    }
    const auto& t = need_offset();
    const int zb = detail::bin_of(t.z_edges, z.norm());
    if (xi >= t.xi_edges.back()) return static_cast<double>(t.tail_count[zb] + t.censored[zb]);
    const int i = detail::bin_of(t.xi_edges, std::max(xi, 0.0)), j = detail::bin_of(t.w_edges, w.norm());
    const int c = detail::bin_of(t.c_edges, detail::relative_c<D>(w, z));
    return static_cast<double>(t.counts[t.index(zb, i, j, c)]);
  }

  /// Exponent a of the fitted tail P(xi > x | xi > xi_max) = (xi_max / x)^a.
  double tail_exponent(Source s, const Perp<D>& z) const { return masses(s, z).tail.exponent; }

 private:
  struct Tail {
    double mass;      // samples with xi >= x0, censored ones included
    double exponent;
    double x0;
  };

  struct Masses {
    const std::vector<double>& xi_edges;
    std::vector<double> bins;
    Tail tail;
    double n;
  };

  Tail tail_of(std::uint64_t count, std::uint64_t censored, double log_sum, double x0) const {
    const double c = static_cast<double>(count), m = static_cast<double>(count + censored);
    const double exposure = log_sum + (censored > 0 ? static_cast<double>(censored) * std::log(xi_cut / x0) : 0.0);
    // censored MLE; with fewer than one uncensored tail sample the exponent is pinned at one event
    const double a = exposure > 0.0 ? std::max(c, 1.0) / exposure : 1.0;
    return {m, a, x0};
  }

  static double tail_marginal(const Tail& t, double n, double xi) {
    return t.mass / n * t.exponent / t.x0 * std::pow(t.x0 / xi, t.exponent + 1.0);
  }

  Masses masses(Source s, const Perp<D>& z) const {
    if (s == Source::Generic) {
      const auto& t = need_generic();
      Masses m{t.xi_edges, std::vector<double>(t.n_xi(), 0.0),
               tail_of(t.tail_count, t.censored, t.tail_log_sum, t.xi_edges.back()),
               static_cast<double>(t.sample_count)};
      for (int i = 0; i < t.n_xi(); ++i)
        for (int j = 0; j < t.n_w(); ++j) m.bins[i] += static_cast<double>(t.at(i, j));
      return m;
    }
    const auto& t = need_offset();
    const int zb = detail::bin_of(t.z_edges, z.norm());
    Masses m{t.xi_edges, std::vector<double>(t.n_xi(), 0.0),
             tail_of(t.tail_count[zb], t.censored[zb], t.tail_log_sum[zb], t.xi_edges.back()),
             static_cast<double>(t.sample_count[zb])};
    if (m.n == 0.0) throw Error(ErrorKind::Validation, "DegenerateKernel", "empty z bin");
    for (int i = 0; i < t.n_xi(); ++i)
      for (int j = 0; j < t.n_w(); ++j)
        for (int c = 0; c < t.n_c(); ++c) m.bins[i] += static_cast<double>(t.counts[t.index(zb, i, j, c)]);
    return m;
  }

  static Perp<D> random_direction(Rng& rng) {
    if constexpr (D == 2) {
      Perp<D> e;
      e[0] = rng.uniform() < 0.5 ? -1.0 : 1.0;
      return e;
    } else {
      return rng.unit_vector<D - 1>();
    }
  }
};

struct EstimateOptions {
  KernelBins bins;
  double xi_cut = 1e3;  // rescaled flight cutoff; longer flights are censored
  std::uint64_t seed = 1;
  unsigned threads = 1;
  bool strict = false;  // InsufficientSamples if a populated bin has fewer than 10 hits
  std::size_t block = 4096;
};

namespace detail {

inline void check_populated(const std::vector<std::uint64_t>& counts) {
  for (auto c : counts)
    if (c > 0 && c < 10) throw Error(ErrorKind::Validation, "InsufficientSamples", "populated bin with fewer than 10 hits");
}

template <int D> void check_estimate_config(const MicroConfig<D>& cfg, std::size_t n_rays, const EstimateOptions& o) {
  check_config(cfg);
  if (n_rays == 0) throw config_error("BadCount", "need at least one ray");
  if (!(o.bins.xi_max > 0.0) || o.bins.n_xi < 1 || o.bins.n_w < 1 || o.bins.n_z < 1 || o.bins.n_c < 1)
    throw config_error("BadBins", "kernel bins must be positive");
  if (!(o.xi_cut > o.bins.xi_max)) throw config_error("BadCutoff", "xi_cut must exceed xi_max");
}

}  // namespace detail

/// Histogram estimate of Phi_alpha(xi, w, 0) from rays leaving the fixed point q0 in
/// uniformly random directions: xi = rho^{d-1} tau_1 and w = (-w_1 K(v))_perp.
/// Ray i uses RNG stream (seed, i), so the table does not depend on the thread count.
template <int D>
GenericTable estimate_generic_table(const MicroConfig<D>& cfg, const Vec<D>& q0, std::size_t n_rays,
                                    const EstimateOptions& o) {
  detail::check_estimate_config(cfg, n_rays, o);
  if (inside_some_ball(cfg.lattice, q0, cfg.rho))
    throw Error(ErrorKind::Validation, "StartInsideBall", "base point lies inside a scatterer");
  const double s = std::pow(cfg.rho, D - 1);
  const double t_max = o.xi_cut / s;
  const auto parts = parallel_blocks(n_rays, o.block, o.threads, [&](std::size_t b, std::size_t e) {
    GenericTable t = empty_generic_table<D>(o.bins);
    const double xi_max = t.xi_edges.back();
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(o.seed, i);
      const Vec<D> v = rng.unit_vector<D>();
      ++t.sample_count;
      const auto hit = free_path<D>(cfg.lattice, {q0, v}, cfg.rho, t_max);
      if (!hit) {
        ++t.censored;
        continue;
      }
      const double xi = s * hit->tau;
      if (xi >= xi_max) {
        ++t.tail_count;
        t.tail_log_sum += std::log(xi / xi_max);
        continue;
      }
      const Perp<D> w = perp<D>(Vec<D>(-hit->w * rotation_to_e1<D>(v)));
      ++t.at(detail::bin_of(t.xi_edges, xi), detail::bin_of(t.w_edges, w.norm()));
    }
    return t;
  });
  GenericTable out = empty_generic_table<D>(o.bins);
  for (const auto& p : parts) out.merge(p);
  if (o.strict) detail::check_populated(out.counts);
  return out;
}

/// Histogram estimate of Phi_0(xi, w, z) from rays leaving the scatterer at the
/// origin: the start point is rho * beta with beta K(v) = (sqrt(1 - |z|^2), z),
/// v uniform, |z| uniform on [0, 1) and the direction of z uniform.
template <int D>
OffsetTable estimate_offset_table(const MicroConfig<D>& cfg, std::size_t n_rays, const EstimateOptions& o) {
  detail::check_estimate_config(cfg, n_rays, o);
  const double s = std::pow(cfg.rho, D - 1);
  const double t_max = o.xi_cut / s;
  const auto parts = parallel_blocks(n_rays, o.block, o.threads, [&](std::size_t b, std::size_t e) {
    OffsetTable t = empty_offset_table<D>(o.bins);
    const double xi_max = t.xi_edges.back();
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(o.seed, i);
      const Vec<D> v = rng.unit_vector<D>();
      Perp<D> z;
      if constexpr (D == 2) {
        z[0] = rng.uniform(-1.0, 1.0);
      } else {
        z = rng.uniform() * rng.unit_vector<D - 1>();
      }
      const Mat<D> K = rotation_to_e1<D>(v);
      const Vec<D> beta = lift_hemisphere<D>(z) * K.transpose();
      const Vec<D> q = outgoing_offset<D>(beta, cfg.rho);
      const int zb = detail::bin_of(t.z_edges, z.norm());
      ++t.sample_count[zb];
      const auto hit = free_path<D>(cfg.lattice, {q, v}, cfg.rho, t_max);
      if (!hit) {
        ++t.censored[zb];
        continue;
      }
      const double xi = s * hit->tau;
      if (xi >= xi_max) {
        ++t.tail_count[zb];
        t.tail_log_sum[zb] += std::log(xi / xi_max);
        continue;
      }
      const Perp<D> w = perp<D>(Vec<D>(-hit->w * K));
      const int c = detail::bin_of(t.c_edges, detail::relative_c<D>(w, z));
      ++t.counts[t.index(zb, detail::bin_of(t.xi_edges, xi), detail::bin_of(t.w_edges, w.norm()), c)];
    }
    return t;
  });
  OffsetTable out = empty_offset_table<D>(o.bins);
  for (const auto& p : parts) out.merge(p);
  if (o.strict) detail::check_populated(out.counts);
  return out;
}

/// Estimates both tables and wraps them as a backend.
template <int D>
EmpiricalKernel<D> estimate_phi(const MicroConfig<D>& cfg, const Vec<D>& q0, std::size_t n_rays,
                                std::size_t n_offset_rays, const EstimateOptions& o) {
  EmpiricalKernel<D> k;
  k.rho = cfg.rho;
  k.xi_cut = o.xi_cut;
  k.lattice_id = lattice_hash(cfg.lattice);
  k.base_point = q0;
  if (n_rays > 0) k.generic = estimate_generic_table<D>(cfg, q0, n_rays, o);
  if (n_offset_rays > 0) {
    EstimateOptions o2 = o;
    o2.seed = mix64(o.seed ^ 0x6f66667365746f66ULL);
    k.offset = estimate_offset_table<D>(cfg, n_offset_rays, o2);
  }
  return k;
}

// ---------------------------------------------------------------------------
// Kernel table files

template <int D> nlohmann::json kernel_to_json(const EmpiricalKernel<D>& k) {
  nlohmann::json j;
  j["schema"] = "lorentz.kernel_table";
  j["schema_version"] = 1;
  j["dimension"] = D;
  j["rho"] = k.rho;
  j["xi_cut"] = k.xi_cut;
  j["lattice_hash"] = k.lattice_id;
  j["base_point"] = std::vector<double>(k.base_point.data(), k.base_point.data() + D);
  if (k.generic) {
    const auto& t = *k.generic;
    j["generic"] = {{"xi_edges", t.xi_edges},       {"w_edges", t.w_edges},
                    {"counts", t.counts},           {"sample_count", t.sample_count},
                    {"tail_count", t.tail_count},   {"tail_log_sum", t.tail_log_sum},
                    {"censored", t.censored},       {"normalization", k.generic_normalization()}};
  }
  if (k.offset) {
    const auto& t = *k.offset;
    j["offset"] = {{"xi_edges", t.xi_edges},         {"z_edges", t.z_edges},
                   {"w_edges", t.w_edges},           {"c_edges", t.c_edges},
                   {"counts", t.counts},             {"sample_count", t.sample_count},
                   {"tail_count", t.tail_count},     {"tail_log_sum", t.tail_log_sum},
                   {"censored", t.censored}};
  }
  return j;
}

template <int D> EmpiricalKernel<D> kernel_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema") != "lorentz.kernel_table") throw config_error("BadKernelFile", "not a kernel table");
    if (j.at("schema_version").get<int>() != 1) throw config_error("BadKernelFile", "unsupported schema version");
    if (j.at("dimension").get<int>() != D) throw config_error("BadKernelFile", "dimension mismatch");
    EmpiricalKernel<D> k;
    k.rho = j.at("rho").get<double>();
    k.xi_cut = j.at("xi_cut").get<double>();
    k.lattice_id = j.at("lattice_hash").get<std::string>();
    const auto bp = j.at("base_point").get<std::vector<double>>();
    for (int i = 0; i < D; ++i) k.base_point[i] = bp.at(i);
    if (j.contains("generic")) {
      const auto& g = j["generic"];
      GenericTable t;
      g.at("xi_edges").get_to(t.xi_edges);
      g.at("w_edges").get_to(t.w_edges);
      g.at("counts").get_to(t.counts);
      t.sample_count = g.at("sample_count").get<std::uint64_t>();
      t.tail_count = g.at("tail_count").get<std::uint64_t>();
      t.tail_log_sum = g.at("tail_log_sum").get<double>();
      t.censored = g.at("censored").get<std::uint64_t>();
      if (t.counts.size() != static_cast<std::size_t>(t.n_xi()) * t.n_w())
        throw config_error("BadKernelFile", "generic counts have the wrong size");
      k.generic = std::move(t);
    }
    if (j.contains("offset")) {
      const auto& g = j["offset"];
      OffsetTable t;
      g.at("xi_edges").get_to(t.xi_edges);
      g.at("z_edges").get_to(t.z_edges);
      g.at("w_edges").get_to(t.w_edges);
      g.at("c_edges").get_to(t.c_edges);
      g.at("counts").get_to(t.counts);
      g.at("sample_count").get_to(t.sample_count);
      g.at("tail_count").get_to(t.tail_count);
      g.at("tail_log_sum").get_to(t.tail_log_sum);
      g.at("censored").get_to(t.censored);
      const std::size_t nz = t.n_z();
      if (t.counts.size() != nz * t.n_xi() * t.n_w() * t.n_c() || t.sample_count.size() != nz ||
          t.tail_count.size() != nz || t.tail_log_sum.size() != nz || t.censored.size() != nz)
        throw config_error("BadKernelFile", "offset arrays have the wrong size");
      k.offset = std::move(t);
    }
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("BadKernelFile", e.what());
  }
}

template <int D> void save_kernel(const EmpiricalKernel<D>& k, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw config_error("OutputFile", "cannot write " + path);
  os << kernel_to_json(k).dump(1) << '\n';
}

template <int D> EmpiricalKernel<D> load_kernel(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("KernelFile", "cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("BadKernelFile", e.what());
  }
  return kernel_from_json<D>(j);
}

// ---------------------------------------------------------------------------
// Transition densities

/// p(v0, xi, v1) = J(v0, v1) Phi_generic(xi, w, 0), w = -beta^-_{e1}(v1 K(v0))_perp.
template <int D>
double p_density(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& v0, double xi,
                 const Vec<D>& v1) {
  const auto w = impact_parameter<D>(prof, v0, v1);
  if (!w) return 0.0;
  return jacobian_j<D>(prof, v0, v1) * k.phi(Source::Generic, xi, *w, Perp<D>::Zero());
}

/// p_{0, beta^+_{v0}}(v1, xi, v2) = J(v1, v2) Phi_0(xi, w, z), z = (beta^+_{v0}(v1) K(v1))_perp.
template <int D>
double p_plus_density(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& v0, const Vec<D>& v1,
                      double xi, const Vec<D>& v2) {
  const auto z = exit_offset<D>(prof, v0, v1);
  if (!z) return 0.0;
  const auto w = impact_parameter<D>(prof, v1, v2);
  if (!w) return 0.0;
  return jacobian_j<D>(prof, v1, v2) * k.phi(Source::Lattice, xi, *w, *z);
}

/// I(S1, S2): integral of p_plus(S1^, S2^, |S2|, u) over u. By the substitution
/// u -> impact parameter this is the xi-marginal of Phi_0 at the exit offset.
template <int D>
double i_integral(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& S1, const Vec<D>& S2) {
  const auto z = exit_offset<D>(prof, Vec<D>(S1.normalized()), Vec<D>(S2.normalized()));
  if (!z) return 0.0;
  return k.marginal(Source::Lattice, S2.norm(), *z);
}

/// Same integral by Gauss-Legendre quadrature over the sphere (n nodes in the polar angle).
template <int D>
double i_integral_quadrature(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& S1,
                             const Vec<D>& S2, int n = 64) {
  const Vec<D> a = S1.normalized(), b = S2.normalized();
  const double xi = S2.norm();
  return integrate_sphere<D>([&](const Vec<D>& u) { return p_plus_density<D>(prof, k, a, b, xi, u); }, b,
                             prof.b_theta(), n, 64);
}

/// Memory-two transition density Psi(S1, S2, S3) on R^d (Lebesgue measure in S3).
template <int D>
double psi(const ScatteringProfile& prof, const KernelBackend<D>& k, const Vec<D>& S1, const Vec<D>& S2,
           const Vec<D>& S3) {
  const double i12 = i_integral<D>(prof, k, S1, S2);
  if (i12 == 0.0) return 0.0;
  const double r3 = S3.norm();
  const double pp = p_plus_density<D>(prof, k, Vec<D>(S1.normalized()), Vec<D>(S2.normalized()), S2.norm(),
                                      Vec<D>(S3 / r3));
  if (pp == 0.0) return 0.0;
  return std::pow(r3, 1 - D) * pp * i_integral<D>(prof, k, S2, S3) / i12;
}

/// Joint density of (S_1, ..., S_n) in Lebesgue measure, including lambda'(S_1^).
template <int D>
double p_joint(const ScatteringProfile& prof, const KernelBackend<D>& k, const DirectionDensity<D>& lambda,
               const std::vector<Vec<D>>& S) {
  const std::size_t n = S.size();
  if (n == 0) return 1.0;
  double out = lambda(Vec<D>(S[0].normalized()));
  for (const auto& s : S) out *= std::pow(s.norm(), 1 - D);
  if (n == 1) return out * k.marginal(Source::Generic, S[0].norm(), Perp<D>::Zero());
  out *= p_density<D>(prof, k, Vec<D>(S[0].normalized()), S[0].norm(), Vec<D>(S[1].normalized()));
  for (std::size_t j = 0; j + 2 < n; ++j) {
    if (out == 0.0) return 0.0;
    out *= p_plus_density<D>(prof, k, Vec<D>(S[j].normalized()), Vec<D>(S[j + 1].normalized()), S[j + 1].norm(),
                             Vec<D>(S[j + 2].normalized()));
  }
  if (out == 0.0) return 0.0;
  return out * i_integral<D>(prof, k, S[n - 2], S[n - 1]);
}

}  // namespace lorentz
