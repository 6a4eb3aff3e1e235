// Writes the deflection profile of a repulsive muffin-tin Coulomb scatterer
// V(r) = alpha * max(1/r - 1, 0) at energy E (unit ball, unit speed) as a
// phi,theta1,theta2 table.
//
// For impact parameter b = sin(phi) the orbit turns at r_min, and
//   theta1 = 2 phi + 2 * int_{r_min}^1 b dr / (r^2 sqrt(1 - b^2/r^2 - V(r)/E)),
// i.e. pi minus the classical deflection angle. Time reversal symmetry of the
// orbit gives theta2 = theta1 - phi.

#include "lorentz/linalg.hpp"

#include <CLI11.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <string>

namespace {

std::string fmt(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

double theta1(double phi, double k) {
  using lorentz::pi;
  const double b = std::sin(phi);
  if (b == 0.0) return 0.0;
  if (phi >= 0.5 * pi) return pi;
  // turning points: (1 + k) r^2 - k r - b^2 = (1 + k)(r - r_min)(r - r_neg)
  const double disc = std::sqrt(k * k + 4.0 * (1.0 + k) * b * b);
  const double r_min = (k + disc) / (2.0 * (1.0 + k));
  const double r_neg = -b * b / ((1.0 + k) * r_min);
  // with r = r_min + s^2 the inverse square-root endpoint singularity cancels
  auto f = [&](double s) {
    const double r = r_min + s * s;
    return 2.0 * b / (r * std::sqrt((1.0 + k) * (r - r_neg)));
  };
  boost::math::quadrature::tanh_sinh<double> q;
  const double I = q.integrate(f, 0.0, std::sqrt(1.0 - r_min), 1e-14);
  return 2.0 * phi + 2.0 * I;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"muffin-tin Coulomb deflection table"};
  double alpha = 0.5, energy = 0.5;
  int rows = 721;
  std::string out = "muffin_tin_coulomb.csv";
  app.add_option("--alpha", alpha, "potential strength (> 0, repulsive)");
  app.add_option("--energy", energy, "kinetic energy");
  app.add_option("--rows", rows, "grid rows on [0, pi/2]");
  app.add_option("--out", out, "output CSV");
  CLI11_PARSE(app, argc, argv);
  if (!(alpha > 0.0 && energy > 0.0 && rows >= 3)) {
    std::cerr << "need alpha > 0, energy > 0, rows >= 3\n";
    return 2;
  }
  const double k = alpha / energy;
  std::ofstream os(out);
  os << "# schema: lorentz.profile v1\n";
  os << "# muffin-tin Coulomb, alpha=" << fmt(alpha) << " energy=" << fmt(energy) << "\n";
  os << "phi,theta1,theta2\n";
  for (int i = 0; i < rows; ++i) {
    const double phi = 0.5 * lorentz::pi * i / (rows - 1);
    const double t1 = theta1(phi, k);
    os << fmt(phi) << ',' << fmt(t1) << ',' << fmt(t1 - phi) << '\n';
  }
  return os ? 0 : 1;
}
