#include <cmath>
#include <numbers>
#include <random>

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <gtest/gtest.h>

#include "trapcert/cross_section.hpp"

using namespace trapcert;

TEST(CrossSection, Invariants) {
  for (double al : {0.25, 0.5, 0.75}) {
    auto p = solve_cross_section(al, 0.7);
    EXPECT_NEAR(p.norm_check, 1.0, 1e-8);
    EXPECT_GT(p.lambda1, 0.0);
    const double mx = p.sup();
    for (std::size_t i = 0; i < p.grid.size(); ++i) {
      const double n = p.grid[i];
      if (std::abs(n) < p.a * (1 - 1e-12)) EXPECT_GT(p.u1[i], 0.0);
      EXPECT_LE(std::abs(p(n) - p(-n)), 1e-6 * mx);
    }
    EXPECT_EQ(p(p.a), 0.0);
    EXPECT_EQ(p(-p.a), 0.0);
  }
}

TEST(CrossSection, NormalizationByIndependentQuadrature) {
  auto p = solve_cross_section(0.3, 1.4);
  boost::math::quadrature::tanh_sinh<double> ts;
  const double v = ts.integrate([&](double n) { return p(n) * p(n); }, -1.4, 1.4);
  EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(CrossSection, ScalingLaw) {
  auto p1 = solve_cross_section(0.3, 1.0), p2 = solve_cross_section(0.3, 2.0);
  EXPECT_NEAR(p2.lambda1 / p1.lambda1, std::pow(2.0, -0.6), 1e-4);
}

TEST(CrossSection, HalfValue) {
  auto p = solve_cross_section(0.5, 1.0);
  EXPECT_NEAR(p.lambda1, 1.1578, 5e-5);
  EXPECT_LT(p.error_estimate, 1e-6);
}

TEST(CrossSection, NearLocalLimit) {
  auto p = solve_cross_section(0.95, 1.0);
  const double local = std::pow(std::numbers::pi / 2, 2);
  EXPECT_LT(std::abs(p.lambda1 - local) / local, 0.15);
}

TEST(CrossSection, MonotoneInWidth) {
  double prev = 1e300;
  for (double a : {0.3, 0.5, 1.0, 2.5}) {
    auto p = solve_cross_section(0.6, a);
    EXPECT_LT(p.lambda1, prev);
    prev = p.lambda1;
  }
}

TEST(CrossSection, StiffnessMatchesFourierQuadrature) {
  // a[u1] = int |xi|^{2a} |F u1|^2 integrated directly with the Bessel transform;
  // beyond X the integrand is ~ A(xi)/xi^2 with A oscillating, so the tail is mean(A)/X
  for (double al : {0.25, 0.75}) {
    auto p = solve_cross_section(al, 1.0, 24);
    auto f = [&](double xi) { const double v = p.fourier(xi); return 2.0 * std::pow(xi, 2 * al) * v * v; };
    const double X = 600.0;
    std::vector<double> br;
    for (int k = 0; k <= 300; ++k) br.push_back(2.0 * k);
    const double s = composite_rule(br, 24).apply(f);
    double mean = 0.0;
    const int m = 4000;
    for (int i = 0; i < m; ++i) {
      const double xi = X - 20 * std::numbers::pi * (i + 0.5) / m;
      mean += xi * xi * f(xi) / m;
    }
    EXPECT_NEAR(s + mean / X, p.lambda1, 2e-5 * p.lambda1) << al;
  }
}

TEST(CrossSection, FourierTransformAgainstDirect) {
  auto p = solve_cross_section(0.4, 0.8, 20);
  boost::math::quadrature::tanh_sinh<double> ts;
  for (double xi : {0.0, 0.7, 3.0, 11.0}) {
    const double d = ts.integrate([&](double n) { return p(n) * std::cos(xi * n); }, -0.8, 0.8) /
                     std::sqrt(2 * std::numbers::pi);
    EXPECT_NEAR(p.fourier(xi), d, 1e-10);
  }
}

TEST(CrossSection, ResidualExactVector) {
  auto p = solve_cross_section(0.75, 0.5);
  EXPECT_LE(eigen_residual(p), 1e-10);
}

TEST(CrossSection, ResidualPerturbation) {
  auto p = solve_cross_section(0.6, 1.0);
  std::vector<double> c = p.coeffs;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += 0.01 * p.coeffs2[i];
  EXPECT_NEAR(eigen_residual(p, c), 0.01 * (p.lambda2 - p.lambda1), 1e-3 * 0.01 * (p.lambda2 - p.lambda1));
}

TEST(CrossSection, ResidualScaleInvariant) {
  auto p = solve_cross_section(0.6, 1.0);
  std::vector<double> c = p.coeffs;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = 3.7 * (c[i] + 0.02 * p.coeffs2[i]);
  std::vector<double> d = p.coeffs;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = d[i] + 0.02 * p.coeffs2[i];
  EXPECT_NEAR(eigen_residual(p, c), eigen_residual(p, d), 1e-14);
}

TEST(CrossSection, MinMaxUpperBounds) {
  auto p = solve_cross_section(0.35, 1.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  const auto& f = p.form;
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd v(f.n);
    for (int i = 0; i < f.n; ++i) v(i) = g(rng);
    EXPECT_GE(v.dot(f.S * v) / v.dot(f.M * v), p.lambda1 - 1e-12);
  }
}

TEST(CrossSection, SymmetricForm) {
  auto p = solve_cross_section(0.45, 1.0);
  const auto& M = p.form.M;
  EXPECT_LE((M - M.transpose()).norm(), 1e-12 * M.norm());
}

TEST(CrossSection, TwoGridConvergence) {
  double prev = 1e300;
  const double ref = solve_cross_section(0.25, 1.0, 60).lambda1;
  for (int n : {4, 8, 16}) {
    const double d = std::abs(solve_cross_section(0.25, 1.0, n).lambda1 - ref);
    EXPECT_LT(d, prev);
    prev = d;
  }
}

TEST(CrossSection, ResolutionTooSmall) { EXPECT_THROW(solve_cross_section(0.5, 1.0, 2), CapabilityError); }

TEST(CrossSection, ExportImportRoundTrip) {
  auto p = solve_cross_section(0.55, 0.9);
  auto q = eigenpair_from_json(nlohmann::json::parse(to_json(p).dump()));
  EXPECT_EQ(q.lambda1, p.lambda1);
  for (double n : {-0.5, 0.0, 0.33}) EXPECT_EQ(q(n), p(n));
  EXPECT_EQ(to_json(q), to_json(p));
}

TEST(Collocation, AgreesWithGalerkin) {
  for (double al : {0.25, 0.5, 0.75}) {
    auto c = solve_cross_section_collocation(al, 1.0);
    auto g = solve_cross_section(al, 1.0);
    EXPECT_NEAR(c.lambda1, g.lambda1, 1e-4 * g.lambda1) << al;
    EXPECT_LT(std::abs(c.lambda1 - g.lambda1), 10 * c.error_estimate + 1e-8);
  }
}
