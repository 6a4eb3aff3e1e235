#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/linalg.hpp"
#include "lorentz/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lorentz {

/// Probability density on the unit sphere S^{d-1} (w.r.t. surface measure) with a sampler.
template <int D> class DirectionDensity {
 public:
  enum class Kind { Uniform, VonMisesFisher, Cap };

  static DirectionDensity uniform() { return DirectionDensity(Kind::Uniform, basis_vector<D>(0), 0.0); }

  /// Density proportional to exp(kappa * mean . v): a smoothed point mass at `mean`.
  static DirectionDensity von_mises_fisher(const Vec<D>& mean, double kappa) {
    if (!(kappa > 0.0)) throw config_error("BadDirectionDensity", "kappa must be positive");
    return DirectionDensity(Kind::VonMisesFisher, mean.normalized(), kappa);
  }

  /// Uniform on the cap {v : v . axis > c}, -1 < c < 1.
  static DirectionDensity cap(const Vec<D>& axis, double c) {
    if (!(c > -1.0 && c < 1.0)) throw config_error("BadDirectionDensity", "cap threshold must lie in (-1, 1)");
    return DirectionDensity(Kind::Cap, axis.normalized(), c);
  }

  Kind kind() const { return kind_; }
  const Vec<D>& axis() const { return axis_; }
  double parameter() const { return param_; }

  double operator()(const Vec<D>& v) const {
    switch (kind_) {
      case Kind::Uniform:
        return 1.0 / unit_sphere_area(D);
      case Kind::VonMisesFisher:
        return norm_ * std::exp(param_ * (axis_.dot(v) - 1.0));
      case Kind::Cap:
        return axis_.dot(v) > param_ ? norm_ : 0.0;
    }
    return 0.0;
  }

  Vec<D> sample(Rng& rng) const {
    switch (kind_) {
      case Kind::Uniform:
        return rng.unit_vector<D>();
      case Kind::VonMisesFisher:
        return around_axis(sample_vmf_cos(rng), rng);
      case Kind::Cap: {
        // cosine of the polar angle has density proportional to (1 - t^2)^{(d-3)/2} on (c, 1)
        double t;
        if constexpr (D == 3) {
          t = rng.uniform(param_, 1.0);
        } else {
          const double a0 = std::acos(param_);
          t = std::cos(rng.uniform(0.0, a0));
        }
        return around_axis(t, rng);
      }
    }
    return axis_;
  }

 private:
  DirectionDensity(Kind k, const Vec<D>& axis, double param) : kind_(k), axis_(axis), param_(param) {
    if (k == Kind::VonMisesFisher) {
      // normalization written with the exp(-kappa) factor folded in, stable for large kappa
      if constexpr (D == 3) {
        norm_ = param_ / (2.0 * pi * (1.0 - std::exp(-2.0 * param_)));
      } else {
        static_assert(D == 2);
        norm_ = 1.0 / (2.0 * pi * std::exp(-param_) * std::cyl_bessel_i(0.0, param_));
      }
    } else if (k == Kind::Cap) {
      if constexpr (D == 3) {
        norm_ = 1.0 / (2.0 * pi * (1.0 - param_));
      } else {
        norm_ = 1.0 / (2.0 * std::acos(param_));
      }
    }
  }

  // Unit vector with axis component t and a uniformly random orthogonal part.
  Vec<D> around_axis(double t, Rng& rng) const {
    t = std::clamp(t, -1.0, 1.0);
    const double s = std::sqrt(std::max(0.0, 1.0 - t * t));
    Vec<D> e = rng.unit_vector<D>();
    e -= e.dot(axis_) * axis_;
    const double n = e.norm();
    e = n > 1e-12 ? Vec<D>(e / n) : any_orthogonal<D>(axis_);
    return (t * axis_ + s * e).normalized();
  }

  // Wood's rejection sampler for the axis component of a von Mises-Fisher draw.
  double sample_vmf_cos(Rng& rng) const {
    const double k = param_, m = D - 1;
    if constexpr (D == 3) {
      const double u = rng.uniform();
      return 1.0 + std::log(u + (1.0 - u) * std::exp(-2.0 * k)) / k;
    }
    const double b = m / (2.0 * k + std::sqrt(4.0 * k * k + m * m));
    const double x0 = (1.0 - b) / (1.0 + b);
    const double c = k * x0 + m * std::log(1.0 - x0 * x0);
    while (true) {
      const double s = std::sin(0.5 * pi * rng.uniform());
      const double z = s * s;  // Beta(1/2, 1/2)
      const double w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
      if (k * w + m * std::log(1.0 - x0 * w) - c >= std::log(rng.uniform())) return w;
    }
  }

  Kind kind_;
  Vec<D> axis_;
  double param_;
  double norm_ = 0.0;
};

}  // namespace lorentz
