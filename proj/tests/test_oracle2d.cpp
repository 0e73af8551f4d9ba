#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "trapcert/oracle2d.hpp"

using namespace trapcert;

namespace {

constexpr double kA = 0.5;

MaskedGrid full_box(int nx, int ny, double h) {
  return box_grid(nx, ny, h, 0, 0, 1, [](double, double) { return true; });
}

TubularGeometry sharp_bend() { return bend_with_turning(shapes::smooth_bump(), kA, 1.9, 2.5, 0.513); }

const CrossSectionEigenpair& pair75() {
  static const CrossSectionEigenpair p = solve_cross_section(0.75, kA);
  return p;
}

// straight calibration plus the sharply bent guide, h = 1/32 and 1/64
const OracleStudy& study() {
  static const OracleStudy st = run_oracle_study(sharp_bend(), pair75(), 1.0 / 32, 5.0);
  return st;
}

double pixel(const MaskedGrid& g, int i, int j) { return g.mask[g.index(i, j)]; }

}  // namespace

TEST(Oracle2d, KernelConstants) {
  for (double al : {0.1, 0.25, 0.5, 0.75, 0.9})
    EXPECT_NEAR(fractional_kernel_constant(1, al), singular_integral_constant(al), 1e-14);
  // (-Delta)^{1/2} in the plane: 1 / (2 pi)
  EXPECT_NEAR(fractional_kernel_constant(2, 0.5), 0.5 / std::numbers::pi, 1e-14);
}

TEST(Oracle2d, PlaneWaveEigenvector) {
  const MaskedGrid g = full_box(24, 18, 0.3);
  for (double al : {0.25, 0.75}) {
    FormOperator op(g, al, false);
    for (auto [fx, fy] : {std::pair{1, 0}, std::pair{3, 2}, std::pair{12, 9}, std::pair{5, -7}}) {
      const double kx = 2 * std::numbers::pi * fx / (24 * 0.3), ky = 2 * std::numbers::pi * fy / (18 * 0.3);
      Eigen::VectorXd u(g.nx * g.ny);
      for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i) u[g.index(i, j)] = std::cos(kx * g.x(i) + ky * g.y(j));
      const Eigen::VectorXd v = apply_form_operator(op, u);
      const double sym = std::pow(kx * kx + ky * ky, al);
      EXPECT_LT((v - sym * u).cwiseAbs().maxCoeff(), 1e-12 * sym) << fx << ' ' << fy;
    }
  }
}

TEST(Oracle2d, AlphaOneIsSpectralLaplacian) {
  const int nx = 12, ny = 10;
  const double h = 0.7;
  const MaskedGrid g = full_box(nx, ny, h);
  FormOperator op(g, 1.0, false);
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> U(-1, 1);
  Eigen::VectorXd u(nx * ny);
  for (auto& x : u) x = U(rng);
  // naive DFT, symbol |k|^2 on the symmetric frequency range; Nyquist rows are real
  using cd = std::complex<double>;
  std::vector<cd> F(nx * ny);
  for (int q = 0; q < ny; ++q)
    for (int p = 0; p < nx; ++p) {
      cd s = 0;
      for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
          s += u[i + nx * j] * std::polar(1.0, -2 * std::numbers::pi * (double(p * i) / nx + double(q * j) / ny));
      const int fp = p <= nx / 2 ? p : p - nx, fq = q <= ny / 2 ? q : q - ny;
      const double kx = 2 * std::numbers::pi * fp / (nx * h), ky = 2 * std::numbers::pi * fq / (ny * h);
      F[p + nx * q] = s * (kx * kx + ky * ky);
    }
  Eigen::VectorXd ref(nx * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      cd s = 0;
      for (int q = 0; q < ny; ++q)
        for (int p = 0; p < nx; ++p)
          s += F[p + nx * q] * std::polar(1.0, 2 * std::numbers::pi * (double(p * i) / nx + double(q * j) / ny));
      ref[i + nx * j] = s.real() / (nx * ny);
    }
  const Eigen::VectorXd v = apply_form_operator(op, u);
  EXPECT_LT((v - ref).cwiseAbs().maxCoeff(), 1e-12 * ref.cwiseAbs().maxCoeff());
}

TEST(Oracle2d, SymmetricOnMaskedVectors) {
  const MaskedGrid g = rasterize_waveguide(sharp_bend(), kA, 1.0 / 16, {.s_extent = 2.0});
  FormOperator op(g, 0.75);
  std::mt19937 rng(11);
  std::normal_distribution<double> N;
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd u(op.size()), v(op.size());
    for (auto& x : u) x = N(rng);
    for (auto& x : v) x = N(rng);
    const Eigen::VectorXd Tu = op.apply(u), Tv = op.apply(v);
    EXPECT_LT(std::abs(Tu.dot(v) - u.dot(Tv)), 1e-10 * Tu.norm() * v.norm());
    EXPECT_GT(Tu.dot(u), 0.0);
  }
}

TEST(Oracle2d, SupportOutsideMaskRejected) {
  const MaskedGrid g = straight_guide_grid(kA, 1.0, 1.0 / 16);
  FormOperator op(g, 0.5);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(g.nx * g.ny);
  std::size_t outside = 0;
  while (g.mask[outside]) ++outside;
  u[outside] = 1.0;
  EXPECT_THROW(apply_form_operator(op, u), InputError);
}

TEST(Oracle2d, CoarseGridRejected) {
  const TubularGeometry straight(CurvatureProfile::zero(1.0), kA, 1.0);
  EXPECT_THROW(rasterize_waveguide(straight, kA, 1.0 / 8, {}), CapabilityError);
  EXPECT_THROW(straight_guide_grid(kA, 2.0, 0.1), CapabilityError);
  EXPECT_NO_THROW(rasterize_waveguide(straight, kA, 1.0 / 16, {}));
}

TEST(Oracle2d, StraightMaskArea) {
  const double S = 3.0, h = 1.0 / 32;
  const TubularGeometry straight(CurvatureProfile::zero(1.0), kA, 1.0);
  const MaskedGrid g = rasterize_waveguide(straight, kA, h, {.s_extent = S});
  const double perimeter = 4 * S + 4 * kA;
  EXPECT_NEAR(g.area(), 2 * kA * 2 * S, 2 * h * perimeter);
  const MaskedGrid r = straight_guide_grid(kA, S, h);
  EXPECT_NEAR(r.area(), 2 * kA * 2 * S, 2 * h * perimeter);
  std::size_t flagged = 0;
  for (int c : g.cells) flagged += g.boundary[c];
  EXPECT_NEAR(double(flagged) * h, perimeter, 4 * h * 8);
}

TEST(Oracle2d, QuarterCircleMaskArea) {
  const double R = 4.0, h = 1.0 / 32, arc = 0.25 * std::numbers::pi * R;  // half the arc
  const double S = arc + 2.0;
  const TubularGeometry bend(CurvatureProfile::constant(1.0 / R, arc), kA, 1.0);
  const MaskedGrid g = rasterize_waveguide(bend, kA, h, {.s_extent = S});
  EXPECT_NEAR(g.area(), 2 * kA * (0.5 * std::numbers::pi * R + 2 * 2.0), 2 * h * (4 * S + 4 * kA));
}

TEST(Oracle2d, EvenProfileGivesMirrorMask) {
  const MaskedGrid g = rasterize_waveguide(sharp_bend(), kA, 1.0 / 32, {.s_extent = 3.0});
  int mismatches = 0;
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) mismatches += pixel(g, i, j) != pixel(g, g.nx - 1 - i, j);
  EXPECT_EQ(mismatches, 0);
}

TEST(Oracle2d, PbmExport) {
  const MaskedGrid g = straight_guide_grid(kA, 1.0, 1.0 / 16);
  std::istringstream is(g.to_pbm());
  std::string magic;
  int nx = 0, ny = 0;
  is >> magic >> nx >> ny;
  EXPECT_EQ(magic, "P1");
  EXPECT_EQ(nx, g.nx);
  EXPECT_EQ(ny, g.ny);
  std::size_t ones = 0, total = 0;
  for (int b; is >> b; ++total) ones += b == 1;
  EXPECT_EQ(total, std::size_t(nx) * ny);
  EXPECT_EQ(ones, g.size());
}

TEST(Oracle2d, IntervalReproducesCrossSection) {
  for (double al : {0.25, 0.5, 0.75}) {
    const auto p = solve_cross_section(al, kA);
    const Extrapolation e = interval_consistency(al, kA, 400);
    EXPECT_LE(std::abs(e.value - p.lambda1), e.error + p.error_estimate) << al;
    EXPECT_LT(std::abs(e.value - p.lambda1), 1e-4 * p.lambda1) << al;
  }
}

TEST(Oracle2d, PaddingFourAgreesWithEight) {
  for (double al : {0.25, 0.75}) {
    EigenOptions eo;
    eo.tol = 1e-8;
    eo.max_iter = 1000;
    std::array<double, 2> q{};
    for (int r = 0; r < 2; ++r) {
      FormOperator op(straight_guide_grid(kA, 2.0, 1.0 / 32, 4 << r), al);
      q[r] = lobpcg(op, eo).values[0];
    }
    EXPECT_LT(std::abs(q[0] - q[1]), 5e-4 * q[1]) << al;
  }
}

TEST(Oracle2d, DomainMonotonicity) {
  const double h = 1.0 / 32, S = 2.0;
  const TubularGeometry straight(CurvatureProfile::zero(1.0), kA, 1.0);
  const MaskedGrid big = rasterize_waveguide(straight, kA + 2 * h, h, {.s_extent = S});
  RasterOptions ro{.s_extent = S, .fixed_box = true, .x0 = big.x0, .y0 = big.y0, .nx = big.nx, .ny = big.ny};
  const MaskedGrid small = rasterize_waveguide(straight, kA, h, ro);
  for (int c : small.cells) ASSERT_TRUE(big.mask[c]);
  ASSERT_GT(big.size(), small.size());
  EigenOptions eo;
  eo.tol = 1e-8;
  eo.max_iter = 1000;
  FormOperator ob(big, 0.5), os(small, 0.5);
  EXPECT_LE(lobpcg(ob, eo).values[0], lobpcg(os, eo).values[0]);
}

TEST(Oracle2d, GridConvergence) {
  std::vector<double> q;
  EigenOptions eo;
  eo.tol = 1e-8;
  eo.max_iter = 1000;
  for (double h : {1.0 / 16, 1.0 / 32, 1.0 / 64}) {
    FormOperator op(straight_guide_grid(kA, 3.0, h), 0.75);
    q.push_back(lobpcg(op, eo).values[0]);
  }
  EXPECT_LT(std::abs(q[2] - q[1]), std::abs(q[1] - q[0]));
}

TEST(Oracle2d, IterationCapGivesInconclusive) {
  FormOperator op(straight_guide_grid(kA, 2.0, 1.0 / 32), 0.75);
  const SpectrumResult r = lowest_eigenvalues(op, 2, 1e-10, pair75().lambda1, {0.0, 0.75}, 0.0, 2);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.verdict, OracleVerdict::inconclusive);
}

TEST(Oracle2d, EigenvaluesOrderedWithResiduals) {
  FormOperator op(straight_guide_grid(kA, 2.0, 1.0 / 32), 0.75);
  const SpectrumResult r = lowest_eigenvalues(op, 3, 1e-6, pair75().lambda1, {0.0, 0.75});
  ASSERT_TRUE(r.converged);
  ASSERT_EQ(r.values.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LE(r.residuals[i], 1e-6 * r.values[i]);
    if (i) EXPECT_LE(r.values[i - 1], r.values[i]);
  }
}

TEST(Oracle2d, StraightGuideNoneBelowThreshold) {
  const OracleStudy& st = study();
  for (const auto& r : st.straight) {
    EXPECT_GE(r.values[0], r.lambda1 * (1 - r.allowance));
    EXPECT_EQ(r.verdict, OracleVerdict::none_below_threshold);
  }
  EXPECT_EQ(st.straight_verdict, OracleVerdict::none_below_threshold);
}

TEST(Oracle2d, SharpBendBoundStateFound) {
  const OracleStudy& st = study();
  for (const auto& r : st.bent) {
    EXPECT_GT(r.margin, 0.0);
    EXPECT_EQ(r.verdict, OracleVerdict::bound_state_found);
  }
  EXPECT_EQ(st.bent_verdict, OracleVerdict::bound_state_found);
  EXPECT_LT(st.bent_extrapolated.value + st.bent_extrapolated.error, st.straight_extrapolated.value);
}

TEST(Oracle2d, StudyJson) {
  const auto j = to_json(study());
  EXPECT_EQ(j["bent_verdict"], "bound_state_found");
  EXPECT_EQ(j["bent"].size(), 2u);
  EXPECT_TRUE(j["bent"][0]["grid"].contains("mask_area"));
}
