#pragma once

#include "lorentz/linalg.hpp"

#include <cmath>
#include <cstdint>

namespace lorentz {

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

/// Counter-based generator: the n-th output is a hash of (key, n).
/// Streams are addressed by (seed, stream index), so work can be split
/// across any number of threads without changing results.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix64(seed + 0x9e3779b97f4a7c15ULL) ^ mix64(stream * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL)),
        key2_(mix64(key_ ^ 0x2545f4914f6cdd1dULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    const std::uint64_t c = counter_++;
    return mix64(mix64(c * 0x9e3779b97f4a7c15ULL ^ key_) + key2_);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double exponential(double rate) { return -std::log(uniform()) / rate; }

  /// Standard normal by Box-Muller; one variate per call, no cached state.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * pi * u2);
  }

  template <int D> Vec<D> unit_vector() {
    if constexpr (D == 2) {
      const double a = 2.0 * pi * uniform();
      return Vec<D>(std::cos(a), std::sin(a));
    } else {
      Vec<D> x;
      for (int i = 0; i < D; ++i) x[i] = normal();
      return x.normalized();
    }
  }

  /// Uniform point in the open unit ball of R^N.
  template <int N> Eigen::Matrix<double, 1, N> in_ball() {
    if constexpr (N == 1) {
      Eigen::Matrix<double, 1, 1> x;
      x[0] = 2.0 * uniform() - 1.0;
      return x;
    } else {
      const double r = std::pow(uniform(), 1.0 / N);
      return r * unit_vector<N>();
    }
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t key2_;
  std::uint64_t counter_ = 0;
};

}  // namespace lorentz
