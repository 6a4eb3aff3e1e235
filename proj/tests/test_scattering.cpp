#include "lorentz/quadrature.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/scattering.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

using namespace lorentz;

namespace {

template <int D> Mat<D> random_orthogonal(Rng& rng) {
  Mat<D> g;
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat<D>> qr(g);
  Mat<D> q = qr.householderQ();
  return q;
}

// Repulsive muffin-tin Coulomb deflection with k = alpha / E, in closed form
// (the orbit integral is elementary after u = 1/r).
double muffin_theta1(double phi, double k) {
  if (phi < 0) return -muffin_theta1(-phi, k);
  const double b = std::sin(phi);
  const double d = std::sqrt(k * k + 4 * (1 + k) * b * b);
  return 2 * phi + pi - 2 * std::asin(std::min(1.0, (2 * b * b + k) / d));
}

ScatteringProfile muffin_table() { return ScatteringProfile::load_csv(LORENTZ_SOURCE_DIR "/data/profiles/muffin_tin_coulomb.csv"); }

ScatteringProfile cutoff_profile() {
  // theta1 = 1.6 phi: image (-0.8 pi, 0.8 pi), so B = 0.2 pi
  return ScatteringProfile::analytic([](double p) { return 1.6 * p; }, [](double) { return 1.6; },
                                     [](double p) { return 0.6 * p; });
}

template <int D> std::pair<Vec<D>, Vec<D>> random_incoming(Rng& rng) {
  const Vec<D> v = rng.unit_vector<D>();
  Vec<D> w = rng.unit_vector<D>();
  if (v.dot(w) > 0) w = -w;
  return {v, w};
}

template <int D> double distance_to_span(const Vec<D>& x, const Vec<D>& a, const Vec<D>& b) {
  Eigen::Matrix<double, D, 2> A;
  A.col(0) = a.transpose();
  A.col(1) = b.transpose();
  const Eigen::Matrix<double, D, 1> r = x.transpose() - A * A.colPivHouseholderQr().solve(x.transpose());
  return r.norm();
}

template <int D> void symmetry_checks(const ScatteringProfile& prof, std::uint64_t seed) {
  Rng rng(seed, D);
  for (int k = 0; k < 1000; ++k) {
    const auto [v, w] = random_incoming<D>(rng);
    const Mat<D> K = random_orthogonal<D>(rng);
    const auto a = theta<D>(prof, v, w);
    const auto b = theta<D>(prof, Vec<D>(v * K), Vec<D>(w * K));
    EXPECT_LE((b.v_plus - a.v_plus * K).norm(), 1e-10);
    EXPECT_LE((b.w_plus - a.w_plus * K).norm(), 1e-10);
    EXPECT_NEAR(a.v_plus.norm(), 1.0, 1e-12);
    EXPECT_NEAR(a.w_plus.norm(), 1.0, 1e-12);
    EXPECT_GT(a.v_plus.dot(a.w_plus), -1e-12);
    if constexpr (D >= 3) {
      EXPECT_LE(distance_to_span<D>(a.v_plus, v, w), 1e-10);
      EXPECT_LE(distance_to_span<D>(a.w_plus, v, w), 1e-10);
    }
  }
}

template <int D> void round_trip_checks(const ScatteringProfile& prof, std::uint64_t seed) {
  Rng rng(seed, D);
  int done = 0;
  while (done < 1000) {
    const Vec<D> v = rng.unit_vector<D>();
    const Vec<D> u = rng.unit_vector<D>();
    const auto w = beta_minus<D>(prof, v, u);
    if (!w) continue;
    ++done;
    EXPECT_LT(v.dot(*w), 0.0);
    EXPECT_LE((theta<D>(prof, v, *w).v_plus - u).norm(), 1e-10);
    const auto wp = beta_plus<D>(prof, v, u);
    ASSERT_TRUE(wp);
    EXPECT_LE((theta<D>(prof, v, *w).w_plus - *wp).norm(), 1e-10);
    const Mat<D> K = random_orthogonal<D>(rng);
    const auto wpk = beta_plus<D>(prof, Vec<D>(v * K), Vec<D>(u * K));
    ASSERT_TRUE(wpk);
    EXPECT_LE((*wpk - *wp * K).norm(), 1e-10);
  }
}

// Integral of J(v, .) over V_v, in the polar angle around v.
template <int D> double integral_of_j(const ScatteringProfile& prof, int n, int panels) {
  const Vec<D> v = basis_vector<D>(0);
  return integrate_sphere<D>([&](const Vec<D>& u) { return jacobian_j<D>(prof, v, u); }, v, prof.b_theta(), n, 8,
                             panels);
}

Mat<3> series_exp(const Mat<3>& A) {
  Eigen::Matrix<long double, 3, 3> term = Eigen::Matrix<long double, 3, 3>::Identity(), sum = term;
  const Eigen::Matrix<long double, 3, 3> Al = A.cast<long double>();
  for (int k = 1; k < 60; ++k) {
    term = term * Al / static_cast<long double>(k);
    sum += term;
  }
  return sum.cast<double>();
}

}  // namespace

TEST(Theta, SpecularHeadOn) {
  const auto p = ScatteringProfile::specular();
  const auto r = theta<3>(p, Vec<3>(1, 0, 0), Vec<3>(-1, 0, 0));
  EXPECT_EQ(r.v_plus, Vec<3>(-1, 0, 0));
  EXPECT_EQ(r.w_plus, Vec<3>(-1, 0, 0));
  const auto m = muffin_table();
  const auto r2 = theta<2>(m, Vec<2>(1, 0), Vec<2>(-1, 0));
  EXPECT_NEAR((r2.v_plus - Vec<2>(-1, 0)).norm(), 0, 1e-15);
}

TEST(Theta, SpecularQuarterTurn) {
  const auto r = theta<2>(ScatteringProfile::specular(), Vec<2>(1, 0),
                          Vec<2>(-std::cos(pi / 4), std::sin(pi / 4)));
  EXPECT_NEAR(r.v_plus[0], 0.0, 1e-15);
  EXPECT_NEAR(r.v_plus[1], 1.0, 1e-15);
}

TEST(Theta, GeneralPathMatchesReflectionFormula) {
  // the plane construction with theta1 = 2 phi must agree with v - 2 (v.w) w
  const auto mirror = ScatteringProfile::analytic([](double p) { return 2 * p; }, [](double) { return 2.0; },
                                                  [](double p) { return p; });
  Rng rng(9, 0);
  for (int k = 0; k < 1000; ++k) {
    const auto [v, w] = random_incoming<3>(rng);
    const auto r = theta<3>(mirror, v, w);
    EXPECT_LE((r.v_plus - (v - 2 * v.dot(w) * w)).norm(), 1e-12);
    EXPECT_LE((r.w_plus - w).norm(), 1e-12);
  }
}

TEST(Theta, NotIncoming) {
  EXPECT_THROW(theta<2>(ScatteringProfile::specular(), Vec<2>(1, 0), Vec<2>(1, 0)), Error);
  EXPECT_THROW(theta<2>(ScatteringProfile::specular(), Vec<2>(1, 0), Vec<2>(0, 1)), Error);
}

TEST(Theta, SymmetryAndPlanarity) {
  symmetry_checks<2>(ScatteringProfile::specular(), 1);
  symmetry_checks<3>(ScatteringProfile::specular(), 2);
  symmetry_checks<2>(muffin_table(), 3);
  symmetry_checks<3>(muffin_table(), 4);
  symmetry_checks<3>(cutoff_profile(), 5);
}

TEST(Theta, SpecularReversal) {
  const auto p = ScatteringProfile::specular();
  Rng rng(10, 0);
  for (int k = 0; k < 1000; ++k) {
    const auto [v, w] = random_incoming<3>(rng);
    const auto a = theta<3>(p, v, w);
    const auto b = theta<3>(p, Vec<3>(-a.v_plus), a.w_plus);
    EXPECT_LE((b.v_plus + v).norm(), 1e-10);
    EXPECT_LE((b.w_plus - w).norm(), 1e-10);
  }
}

TEST(Beta, SpecularExample) {
  const auto p = ScatteringProfile::specular();
  const auto w = beta_minus<3>(p, Vec<3>(1, 0, 0), Vec<3>(0, 1, 0));
  ASSERT_TRUE(w);
  EXPECT_LE((*w - Vec<3>(-1, 1, 0) / std::sqrt(2.0)).norm(), 1e-15);
  const auto wp = beta_plus<3>(p, Vec<3>(1, 0, 0), Vec<3>(0, 1, 0));
  EXPECT_LE((*wp - *w).norm(), 1e-15);
}

TEST(Beta, RoundTripAndSymmetry) {
  round_trip_checks<2>(ScatteringProfile::specular(), 1);
  round_trip_checks<3>(ScatteringProfile::specular(), 2);
  round_trip_checks<2>(muffin_table(), 3);
  round_trip_checks<3>(muffin_table(), 4);
  round_trip_checks<2>(cutoff_profile(), 5);
  round_trip_checks<3>(cutoff_profile(), 6);
}

TEST(Beta, ImageCharacterization) {
  const auto p = cutoff_profile();
  EXPECT_NEAR(p.b_theta(), 0.2 * pi, 1e-15);
  const Vec<2> v(1, 0);
  for (double a : {0.0, 0.1, 0.2 * pi - 1e-6, 0.2 * pi + 1e-10, 0.2 * pi + 2e-9, 0.7, 2.0, pi}) {
    const Vec<2> u(std::cos(a), std::sin(a));
    EXPECT_EQ(beta_minus<2>(p, v, u).has_value(), a > 0.2 * pi + 1e-9) << a;
    EXPECT_EQ(beta_plus<2>(p, v, u).has_value(), a > 0.2 * pi + 1e-9) << a;
  }
  Rng rng(12, 0);
  for (int k = 0; k < 1000; ++k) {
    const Vec<3> v3 = rng.unit_vector<3>(), u3 = rng.unit_vector<3>();
    EXPECT_EQ(beta_minus<3>(p, v3, u3).has_value(), angle_between(v3, u3) > 0.2 * pi + 1e-9);
  }
}

TEST(Omega, Examples) {
  const auto s = ScatteringProfile::specular();
  EXPECT_DOUBLE_EQ(s.omega(1.0), 0.5);
  EXPECT_EQ(s.omega(0.0), 0.0);
  EXPECT_NEAR(muffin_table().omega(0.0), 0.0, 1e-15);
  EXPECT_NEAR(cutoff_profile().omega(0.0), 0.0, 1e-15);
  EXPECT_NEAR(cutoff_profile().omega(1.6), 1.0, 1e-14);
  EXPECT_THROW(cutoff_profile().omega(0.85 * pi), Error);
  EXPECT_THROW(s.omega(3.2), Error);
}

TEST(Omega, TabulatedMatchesBisection) {
  const auto p = muffin_table();
  for (int i = -200; i <= 200; ++i) {
    const double psi = 0.999 * pi * i / 200.0;
    double lo = -pi / 2, hi = pi / 2;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (p.theta1(mid) < psi ? lo : hi) = mid;
    }
    EXPECT_NEAR(p.omega(psi), 0.5 * (lo + hi), 1e-9) << psi;
    EXPECT_NEAR(p.theta1(p.omega(psi)), psi, 1e-10);
  }
}

TEST(Omega, AnalyticInverse) {
  const double k = 1.0;
  const double h = 1e-6;
  const auto p = ScatteringProfile::analytic(
      [k](double x) { return muffin_theta1(x, k); },
      [k, h](double x) { return (muffin_theta1(x + h, k) - muffin_theta1(x - h, k)) / (2 * h); },
      [k](double x) { return muffin_theta1(x, k) - x; });
  for (int i = -50; i <= 50; ++i) {
    const double psi = 0.99 * pi * i / 50.0;
    EXPECT_NEAR(p.theta1(p.omega(psi)), psi, 1e-10);
  }
}

TEST(MuffinTin, TableMatchesClosedForm) {
  const auto p = muffin_table();
  EXPECT_NEAR(p.b_theta(), 0.0, 1e-12);
  for (int i = -300; i <= 300; ++i) {
    const double phi = 0.4999 * pi * i / 300.0;
    EXPECT_NEAR(p.theta1(phi), muffin_theta1(phi, 1.0), 2e-5) << phi;
    EXPECT_NEAR(p.theta2(phi), muffin_theta1(phi, 1.0) - phi, 2e-5) << phi;
  }
}

TEST(Jacobian, SpecularValues) {
  const auto p = ScatteringProfile::specular();
  EXPECT_DOUBLE_EQ(jacobian_j<2>(p, Vec<2>(1, 0), Vec<2>(-1, 0)), 0.5);
  EXPECT_DOUBLE_EQ(jacobian_j<3>(p, Vec<3>(1, 0, 0), Vec<3>(-1, 0, 0)), 0.25);
  Rng rng(13, 0);
  for (int k = 0; k < 1000; ++k) {
    const Vec<3> a = rng.unit_vector<3>(), b = rng.unit_vector<3>();
    EXPECT_NEAR(jacobian_j<3>(p, a, b), 0.25, 1e-12);
    const Vec<2> a2 = rng.unit_vector<2>(), b2 = rng.unit_vector<2>();
    // d = 2 specular: J = cos(psi / 2) / 2 with psi = pi - angle
    EXPECT_NEAR(jacobian_j<2>(p, a2, b2), 0.5 * std::sin(0.5 * angle_between(a2, b2)), 1e-12);
  }
}

TEST(Jacobian, ZeroOffImage) {
  const auto p = cutoff_profile();
  EXPECT_EQ(jacobian_j<2>(p, Vec<2>(1, 0), Vec<2>(1, 0)), 0.0);
  EXPECT_EQ(jacobian_j<2>(p, Vec<2>(1, 0), Vec<2>(std::cos(0.6), std::sin(0.6))), 0.0);
  EXPECT_GT(jacobian_j<2>(p, Vec<2>(1, 0), Vec<2>(std::cos(0.7), std::sin(0.7))), 0.0);
  EXPECT_GT(jacobian_j<3>(p, Vec<3>(1, 0, 0), Vec<3>(-1, 0, 0)), 0.0);
}

TEST(Jacobian, IntegratesToBallVolume) {
  const auto s = ScatteringProfile::specular();
  EXPECT_NEAR(integral_of_j<2>(s, 64, 1), 2.0, 1e-8);
  EXPECT_NEAR(integral_of_j<3>(s, 64, 1), pi, 1e-8);
  const auto c = cutoff_profile();
  EXPECT_NEAR(integral_of_j<2>(c, 64, 1), 2.0, 1e-8);
  EXPECT_NEAR(integral_of_j<3>(c, 64, 1), pi, 1e-8);
  // piecewise-cubic table: derivative kinks limit the rule's order
  const auto m = muffin_table();
  EXPECT_NEAR(integral_of_j<2>(m, 16, 400), 2.0, 1e-6);
  EXPECT_NEAR(integral_of_j<3>(m, 16, 400), pi, 1e-6);
}

TEST(Liouville, Criterion) {
  EXPECT_TRUE(liouville_preserving(ScatteringProfile::specular(), 1000));
  EXPECT_TRUE(liouville_preserving(muffin_table(), 1000));
  const auto plus = ScatteringProfile::analytic([](double p) { return 0.5 * p; }, [](double) { return 0.5; },
                                                [](double p) { return 1.5 * p; });
  EXPECT_TRUE(liouville_preserving(plus, 1000));
  const auto bad = ScatteringProfile::analytic([](double p) { return 2 * p; }, [](double) { return 2.0; },
                                               [](double p) { return p + 0.01 * std::sin(p); });
  EXPECT_FALSE(liouville_preserving(bad, 1000));
  EXPECT_TRUE(liouville_preserving(cutoff_profile(), 1000));
}

TEST(Rotation, IdentityAtE1) {
  EXPECT_EQ(rotation_to_e1<2>(Vec<2>(1, 0)), Mat<2>(Mat<2>::Identity()));
  EXPECT_EQ(rotation_to_e1<3>(Vec<3>(1, 0, 0)), Mat<3>(Mat<3>::Identity()));
}

template <int D> void rotation_checks(std::uint64_t seed) {
  Rng rng(seed, 0);
  for (int k = 0; k < 1000; ++k) {
    Vec<D> v = rng.unit_vector<D>();
    if (k % 10 == 0) {
      v = -basis_vector<D>(0);
      v[1] += std::pow(10.0, -3 - k % 7);
      v.normalize();
    }
    const Mat<D> K = rotation_to_e1<D>(v);
    EXPECT_LE((v * K - basis_vector<D>(0)).norm(), 1e-12);
    EXPECT_LE((K * K.transpose() - Mat<D>::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(K.determinant(), 1.0, 1e-12);
  }
  const Mat<D> K = rotation_to_e1<D>(Vec<D>(-basis_vector<D>(0)));
  EXPECT_LE((-basis_vector<D>(0) * K - basis_vector<D>(0)).norm(), 1e-15);
  EXPECT_NEAR(K.determinant(), 1.0, 1e-15);
}

TEST(Rotation, MapsToE1) {
  rotation_checks<2>(1);
  rotation_checks<3>(2);
}

TEST(Rotation, ExpSkewMatchesSeries) {
  Rng rng(14, 0);
  for (int k = 0; k < 200; ++k) {
    const Perp<3> w = rng.uniform(0, 3.5) * rng.unit_vector<2>();
    Mat<3> A = Mat<3>::Zero();
    A(0, 1) = w[0];
    A(0, 2) = w[1];
    A(1, 0) = -w[0];
    A(2, 0) = -w[1];
    EXPECT_LE((exp_skew<3>(w) - series_exp(A)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ImpactCoordinates, RoundTrip) {
  for (const auto& prof : {ScatteringProfile::specular(), muffin_table(), cutoff_profile()}) {
    Rng rng(15, 0);
    for (int k = 0; k < 500; ++k) {
      const Vec<3> v = rng.unit_vector<3>(), u = rng.unit_vector<3>();
      const auto w = impact_parameter<3>(prof, v, u);
      if (!w) continue;
      EXPECT_LT(w->norm(), 1.0);
      const Vec<3> back = exit_direction_e1<3>(prof, *w) * rotation_to_e1<3>(v).transpose();
      EXPECT_LE((back - u).norm(), 1e-10);
      const auto z = exit_offset<3>(prof, v, u);
      ASSERT_TRUE(z);
      EXPECT_LE(z->norm(), 1.0 + 1e-12);
    }
  }
}

TEST(ProfileTable, Rejections) {
  const std::vector<double> phi{0, 0.5, 1.0, pi / 2};
  EXPECT_NO_THROW(ScatteringProfile::tabulated(phi, {0, 1, 2, pi}, {0, 0.5, 1, pi / 2}));
  EXPECT_THROW(ScatteringProfile::tabulated({0, 1.0, 0.5, pi / 2}, {0, 1, 2, pi}, {0, 0, 0, 0}), Error);
  EXPECT_THROW(ScatteringProfile::tabulated(phi, {0, 1, 0.9, pi}, {0, 0, 0, 0}), Error);
  EXPECT_THROW(ScatteringProfile::tabulated(phi, {0.1, 1, 2, pi}, {0, 0, 0, 0}), Error);
  EXPECT_THROW(ScatteringProfile::tabulated({0, 0.5, 1.0}, {0, 1, 2}, {0, 0, 0}), Error);
  EXPECT_THROW(ScatteringProfile::load_csv("/nonexistent/profile.csv"), Error);
  const std::string path = ::testing::TempDir() + "bad_profile.csv";
  std::ofstream(path) << "a,b,c\n0,0,0\n";
  EXPECT_THROW(ScatteringProfile::load_csv(path), Error);
  std::remove(path.c_str());
}

TEST(ProfileTable, SpecularTableMatchesSpecular) {
  std::vector<double> phi, t1, t2;
  for (int i = 0; i <= 90; ++i) {
    phi.push_back(pi / 2 * i / 90);
    t1.push_back(2 * phi.back());
    t2.push_back(phi.back());
  }
  const auto p = ScatteringProfile::tabulated(phi, t1, t2);
  Rng rng(16, 0);
  for (int k = 0; k < 200; ++k) {
    const Vec<3> a = rng.unit_vector<3>(), b = rng.unit_vector<3>();
    EXPECT_NEAR(jacobian_j<3>(p, a, b), 0.25, 1e-12);
    const double psi = rng.uniform(-pi + 1e-6, pi - 1e-6);
    EXPECT_NEAR(p.omega(psi), psi / 2, 1e-12);
  }
}
