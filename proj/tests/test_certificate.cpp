#include <cmath>
#include <memory>
#include <random>

#include <gtest/gtest.h>

#include "trapcert/certificate.hpp"

using namespace trapcert;

namespace {

ExtensionCache& cache() {
  static ExtensionCache c;
  return c;
}

TrialParameters scaled_params(double theta, double rho, double ell, double L, std::optional<double> tau = {}) {
  TrialParameters p;
  p.theta = theta;
  p.rho = rho;
  p.epsilon = theta / rho;
  p.ell = ell;
  p.L = L;
  p.tau = tau;
  return p;
}

// K-integrals are positive scalars for the algebraic identities
KIntegrals fake_k(double rho, const CutoffProfile& chi, double K = 1.3, double Kr = 0.01) {
  KIntegrals k;
  k.K = K;
  k.K_rho_prime = Kr;
  k.rho = rho;
  k.cutoff_id = chi.id();
  return k;
}

}  // namespace

TEST(Certificate, ThetaHalfSubstitution) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.75, 0.5, 16);
  for (double rho : {1.0, 3.0}) {
    const auto prof = CurvatureProfile::scaled(shapes::smooth_bump(), 0.5 / rho, 40 * rho);
    const TubularGeometry g(prof, 0.5, rho);
    const auto c = constants(g, pair, fake_k(rho, chi), chi, scaled_params(0.5, rho, 40 * rho, 80 * rho));
    EXPECT_NEAR(c.J_plus, 4.0, 1e-12);
    EXPECT_NEAR(c.C_A, rho, 1e-12 * rho);
  }
}

TEST(Certificate, CriterionRhsExample) {
  const auto prof = CurvatureProfile::scaled(shapes::smooth_bump(), 0.25, 10.0);
  const TubularGeometry g(prof, 0.5, 2.0);
  const auto r = criterion(g, scaled_params(0.5, 2.0, 10.0, 20.0));
  EXPECT_NEAR(r.rhs, std::sqrt(2.0) * 2 * 1.5 / 0.25, 1e-12);
  EXPECT_NEAR(r.rhs, 16.97, 5e-3);
  EXPECT_EQ(r.holds, r.lhs > 16.97056274847714);
}

TEST(Certificate, CriterionEquivalentToConstants) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.5, 0.5, 16);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  const std::vector<ProfileShape> shapes_list{shapes::smooth_bump(), shapes::plateau_bump(), shapes::poly_c1(),
                                              shapes::oscillating(12.0)};
  int holds = 0;
  for (int d = 0; d < 50; ++d) {
    const auto& sh = shapes_list[d % shapes_list.size()];
    const double theta = 0.05 + 0.9 * u(rng);
    const double rho = 1.0 + 9.0 * u(rng);
    const double ell = rho * sh.ell_over_rho_threshold(theta) * std::exp(std::log(3.0) * (2 * u(rng) - 1));
    const auto prof = CurvatureProfile::scaled(sh, theta / rho, ell);
    const TubularGeometry g(prof, 0.5, rho);
    const auto p = scaled_params(theta, rho, ell, 2 * ell);
    const auto r = criterion(g, p);
    const auto c = constants(g, pair, fake_k(rho, chi, 0.5 + u(rng)), chi, p);
    ASSERT_FALSE(r.degenerate);
    if (std::abs(r.lhs / r.rhs - 1) > 1e-12) EXPECT_EQ(r.holds, c.C0_prime > c.B0) << "draw " << d;
    holds += r.holds;
    // closed-form threshold of the scaled family
    const double lhs_closed = ell * std::sqrt(sh.c_kappa / sh.c_kappa_prime);
    EXPECT_NEAR(r.lhs, lhs_closed, 1e-12 * lhs_closed);
    EXPECT_EQ(r.holds, ell / rho > sh.ell_over_rho_threshold(theta));
  }
  EXPECT_GT(holds, 5);
  EXPECT_LT(holds, 45);
}

TEST(Certificate, ClosedFormConstantRatio) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.75, 0.5, 16);
  for (const auto& sh : {shapes::smooth_bump(), shapes::plateau_bump(), shapes::oscillating(20.0)})
    for (double theta : {0.2, 0.5, 0.8})
      for (double ratio : {3.0, 30.0, 300.0}) {
        const double rho = 2.0, ell = ratio * rho;
        const TubularGeometry g(CurvatureProfile::scaled(sh, theta / rho, ell), 0.5, rho);
        const auto c = constants(g, pair, fake_k(rho, chi), chi, scaled_params(theta, rho, ell, 2 * ell));
        const double closed = std::pow(1 - theta, 4) / (2 * (1 + theta) * (1 + theta)) * sh.c_kappa /
                              sh.c_kappa_prime * ratio * ratio;
        EXPECT_NEAR(c.C0_prime / c.B0, closed, 1e-10 * closed) << sh.id << " " << theta << " " << ratio;
      }
}

TEST(Certificate, ConstantsReproduceFormulas) {
  const auto chi = CutoffProfile::smooth_step_sq();
  const auto pair = solve_cross_section(0.3, 0.5, 16);
  const double rho = 1.5, theta = 0.4, ell = 50;
  const TubularGeometry g(CurvatureProfile::scaled(shapes::poly_c1(), theta / rho, ell), 0.5, rho);
  auto p = scaled_params(theta, rho, ell, 2 * ell, 9.0);
  p.cutoff_id = chi.id();
  KIntegrals k = fake_k(rho, chi, 2.0, 0.1);
  k.has_tau = true;
  k.tau = 9.0;
  k.K_tau_prime = 0.02;
  const auto c = constants(g, pair, k, chi, p);
  const double ca = c_alpha(0.3), J = 1 / ((1 - theta) * (1 - theta)), CA = rho / (2 * (1 - theta));
  const double kap = g.profile().l2_kappa(), kapp = g.profile().l2_kappa_prime();
  EXPECT_DOUBLE_EQ(c.A0, 2 * ca * J * 2.0 * chi.norm_l2_sq_deriv() / chi.norm_l2_sq());
  EXPECT_DOUBLE_EQ(c.B0, 2 * ca * J * CA * CA * 2.0 * kapp / chi.norm_l2_sq());
  EXPECT_DOUBLE_EQ(c.C0_prime, ca * 2.0 * kap / (4 * chi.norm_l2_sq() * (1 + theta) * (1 + theta)));
}

TEST(Certificate, StraightGuideConstants) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.75, 0.5, 16);
  const TubularGeometry g(CurvatureProfile::zero(3.0), 0.5, 1.0);
  auto p = scaled_params(0.0, 1.0, 3.0, 6.0);
  p.epsilon = 0;
  const auto r = criterion(g, p);
  EXPECT_TRUE(r.degenerate);
  EXPECT_FALSE(r.holds);
  auto c = constants(g, pair, fake_k(1.0, chi), chi, p);
  EXPECT_EQ(c.B0, 0.0);
  EXPECT_EQ(c.C0_prime, 0.0);
  EXPECT_GT(c.A0, 0.0);
  EXPECT_FALSE(c.L_star.has_value());
  const auto b = assemble_bound(c, p, Regime::high);
  EXPECT_NEAR(b.total(), c.A0 / 36.0 + c.c_alpha * c.K_rho_prime, 1e-15);
  EXPECT_GT(b.total(), 0.0);
}

TEST(Certificate, LStarBalancesCutoffTerm) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.75, 0.5, 16);
  const auto sh = shapes::smooth_bump();
  const double rho = 2, theta = 0.5, ell = 2 * sh.ell_over_rho_threshold(theta) * rho;
  const TubularGeometry g(CurvatureProfile::scaled(sh, theta / rho, ell), 0.5, rho);
  auto p = scaled_params(theta, rho, ell, 2 * ell);
  auto c = constants(g, pair, fake_k(rho, chi), chi, p);
  ASSERT_TRUE(c.L_star.has_value());
  const double Ls = *c.L_star;
  EXPECT_NEAR(c.A0 / (Ls * Ls), (c.C0_prime - c.B0) / (4 * Ls), 1e-14 * c.A0 / (Ls * Ls));
  // A0/L^2 + (B0 - C0')/L is negative beyond L* and rises monotonically toward 0
  double prev = c.A0 / (Ls * Ls) + (c.B0 - c.C0_prime) / Ls;
  EXPECT_LT(prev, 0.0);
  for (double f = 1.25; f < 100; f *= 1.25) {
    const double L = f * Ls, v = c.A0 / (L * L) + (c.B0 - c.C0_prime) / L;
    EXPECT_GT(v, prev);
    EXPECT_LT(v, 0.0);
    prev = v;
  }
}

TEST(Certificate, BoundPreconditions) {
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.75, 0.5, 16);
  const TubularGeometry g(CurvatureProfile::scaled(shapes::smooth_bump(), 0.25, 10.0), 0.5, 2.0);
  auto p = scaled_params(0.5, 2.0, 10.0, 19.0);
  auto c = constants(g, pair, fake_k(2.0, chi), chi, p);
  EXPECT_THROW(assemble_bound(c, p, Regime::high), PreconditionError);
  p.L = 20;
  EXPECT_THROW(assemble_bound(c, p, Regime::low), ConfigurationError);
  EXPECT_NO_THROW(assemble_bound(c, p, Regime::high));
  // mismatched superstrip or cutoff
  EXPECT_THROW(constants(g, pair, fake_k(3.0, chi), chi, p), ConfigurationError);
  const auto chi2 = CutoffProfile::smooth_step_sq();
  EXPECT_THROW(constants(g, pair, fake_k(2.0, chi2), chi2, p), ConfigurationError);
}

TEST(Certificate, StraightGuideGapIsImsRemainder) {
  const auto chi = CutoffProfile::smooth_step();
  auto ev = cache().evaluator(0.75, 0.5);
  for (double rho : {1.0, 4.0}) {
    const auto f = cache().field(ev, rho, std::nullopt);
    const auto k = k_integrals(*f, chi, rho, std::nullopt);
    const double c = c_alpha(0.75);
    for (double L : {1e3, 1e5}) {
      auto p = scaled_params(0.0, rho, 2.0, L);
      p.epsilon = 0;
      const TubularGeometry g(CurvatureProfile::zero(2.0), 0.5, rho);
      const auto d = direct_rayleigh(g, *f, chi, p);
      EXPECT_NEAR(d.mass, d.mass_expected, 1e-10 * d.mass_expected);
      EXPECT_EQ(d.v_term, 0.0);
      const double s_expected = c * k.K * chi.norm_l2_sq_deriv() / (L * L * chi.norm_l2_sq());
      EXPECT_NEAR(d.s_term, s_expected, 1e-9 * s_expected);
      EXPECT_NEAR(d.ims_term, c * k.K_rho_prime, 1e-6 * c * k.K_rho_prime) << rho;
      EXPECT_GE(d.numeric_gap, -1e-8);
      EXPECT_LT(d.error_estimate, 1e-6 * d.numeric_gap);
    }
  }
}

TEST(Certificate, StraightGuideGaugeInvariance) {
  const auto chi = CutoffProfile::smooth_step();
  auto ev = cache().evaluator(0.75, 0.5);
  const auto f = cache().field(ev, 2.0, std::nullopt);
  std::vector<double> gaps;
  for (double ell : {0.5, 3.0, 20.0})
    for (const auto& sh : {shapes::smooth_bump(), shapes::poly_c1()}) {
      auto p = scaled_params(0.0, 2.0, ell, 100.0);
      p.epsilon = 0;
      const TubularGeometry g(CurvatureProfile::scaled(sh, 0.0, ell), 0.5, 2.0);
      gaps.push_back(direct_rayleigh(g, *f, chi, p).numeric_gap);
    }
  for (double v : gaps) EXPECT_NEAR(v, gaps.front(), 1e-10);
}

TEST(Certificate, FlatteningIdentity) {
  const TubularGeometry g(CurvatureProfile::scaled(shapes::smooth_bump(), 0.5, 2.0), 0.5, 1.0);
  ASSERT_NEAR(g.theta(), 0.5, 1e-12);
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (double al : {0.25, 0.75}) {
      const auto r = verify_flattening(g, al, seed);
      EXPECT_LT(r.relative_difference, 1e-6) << seed;
      EXPECT_GT(r.physical, 0.0);
    }
}

TEST(Certificate, FlatteningDetectsWrongPotential) {
  // sign flip of V must show up, so the check is not vacuous
  const TubularGeometry g(CurvatureProfile::scaled(shapes::smooth_bump(), 0.5, 2.0), 0.5, 1.0);
  const auto r = verify_flattening(g, 0.5, 3);
  const TubularGeometry straight(CurvatureProfile::zero(2.0), 0.5, 1.0);
  const auto s = verify_flattening(straight, 0.5, 3);
  EXPECT_GT(std::abs(r.physical - s.physical), 1e-3 * s.physical);
}

TEST(Certificate, STermBelowYoungBound) {
  const auto chi = CutoffProfile::smooth_step();
  auto ev = cache().evaluator(0.75, 0.5);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  const std::vector<ProfileShape> list{shapes::smooth_bump(), shapes::plateau_bump(), shapes::oscillating(8.0)};
  for (int d = 0; d < 10; ++d) {
    const double rho = d % 2 ? 1.0 : 2.0;
    const auto f = cache().field(ev, rho, std::nullopt);
    const auto k = k_integrals(*f, chi, rho, std::nullopt);
    const auto& sh = list[d % list.size()];
    const double theta = 0.1 + 0.8 * u(rng), ell = rho * (1 + 30 * u(rng));
    const double L = 2 * ell * (1 + 3 * u(rng));
    const auto p = scaled_params(theta, rho, ell, L);
    const TubularGeometry g(CurvatureProfile::scaled(sh, theta / rho, ell), 0.5, rho);
    auto c = constants(g, ev->pair(), k, chi, p);
    const auto b = assemble_bound(c, p, Regime::high);
    const auto r = direct_rayleigh(g, *f, chi, p);
    EXPECT_LE(r.s_term, b.s_cutoff + b.gauge) << d;
    EXPECT_LE(r.v_term, b.curvature_gain + 1e-12 * std::abs(b.curvature_gain)) << d;
    EXPECT_LE(r.numeric_gap, b.total() + r.error_estimate) << d;
  }
}

TEST(Certificate, TauDoublingQuarter) {
  const auto chi = CutoffProfile::smooth_step();
  auto ev = cache().evaluator(0.25, 0.5);
  const double rho = 1e8;
  std::vector<double> kt;
  for (double tau : {100.0, 200.0, 400.0}) {
    const auto f = make_field(ev, rho, tau);
    const auto k = k_integrals(f, chi, rho, tau);
    kt.push_back(k.K_tau_prime);
    EXPECT_LE(c_alpha(0.25) * k.K_tau_prime, tau_envelope(ev->pair(), chi, tau));
  }
  for (std::size_t i = 0; i + 1 < kt.size(); ++i) EXPECT_GE(kt[i] / kt[i + 1], std::pow(2.0, 1.5) * 0.95);
}

TEST(Certificate, TauEnvelopeHalf) {
  const auto chi = CutoffProfile::smooth_step();
  auto ev = cache().evaluator(0.5, 0.5);
  for (double tau : {20.0, 200.0}) {
    const auto f = make_field(ev, 1e6, tau);
    const auto k = k_integrals(f, chi, 1e6, tau);
    const double env = tau_envelope(ev->pair(), chi, tau);
    EXPECT_LE(k.K_tau_prime, env);
    EXPECT_GT(k.K_tau_prime, 1e-3 * env);
  }
}

TEST(Certificate, OscillatingBelowThresholdFails) {
  const auto sh = shapes::oscillating(40.0);
  SearchOptions o;
  o.ell_over_rho = 0.5 * sh.ell_over_rho_threshold(0.5);
  o.direct = false;
  const auto r = select_parameters(sh, 0.75, 0.5, 0.5, o, &cache());
  EXPECT_EQ(r.verdict, Verdict::criterion_failed);
  EXPECT_FALSE(r.criterion.holds);
  EXPECT_EQ(r.rounds, 1);
}

TEST(Certificate, FrozenSmallTauBinds) {
  SearchOptions o;
  o.tau_start = 1.0;
  o.freeze_tau = true;
  o.direct = false;
  const auto r = select_parameters(shapes::smooth_bump(), 0.25, 0.5, 0.5, o, &cache());
  EXPECT_EQ(r.verdict, Verdict::remainder_too_large);
  EXPECT_EQ(r.binding_constraint, "K_tau_prime");
  ASSERT_FALSE(r.trace.empty());
  EXPECT_GT(r.trace.back().ims_tau, r.trace.back().ims_tau_share);
}

TEST(Certificate, BudgetExhaustedNamesConstraint) {
  SearchOptions o;
  o.max_rounds = 2;
  o.direct = false;
  const auto r = select_parameters(shapes::smooth_bump(), 0.75, 0.5, 0.5, o, &cache());
  EXPECT_EQ(r.verdict, Verdict::remainder_too_large);
  EXPECT_EQ(r.binding_constraint, "K_rho_prime");
  EXPECT_EQ(r.rounds, 2);
  EXPECT_GT(r.analytic_gap, 0.0);
}

TEST(Certificate, WitnessCertifies) {
  const auto r = select_parameters(shapes::smooth_bump(), 0.75, 0.5, 0.5, {}, &cache());
  ASSERT_EQ(r.verdict, Verdict::certified) << r.binding_constraint;
  const auto& c = r.constants;
  EXPECT_LE(r.analytic_gap, -(c.C0_prime - c.B0) / (8 * r.parameters.L));
  EXPECT_LT(r.analytic_gap, 0.0);
  ASSERT_TRUE(r.numeric.has_value());
  EXPECT_LE(r.numeric->numeric_gap, r.analytic_gap + r.numeric->error_estimate);
  EXPECT_LT(r.numeric->numeric_gap, 0.0);
  EXPECT_GE(r.parameters.L, 2 * r.parameters.ell);
  EXPECT_NEAR(r.parameters.rho * r.parameters.epsilon, 0.5, 1e-12);
  // K'_rho along the ladder is nonincreasing
  for (std::size_t i = 0; i + 1 < r.trace.size(); ++i) EXPECT_LE(r.trace[i + 1].ims_rho, r.trace[i].ims_rho);
}

TEST(Certificate, ReportJson) {
  SearchOptions o;
  o.max_rounds = 1;
  const auto r = select_parameters(shapes::smooth_bump(), 0.75, 0.5, 0.5, o, &cache());
  const auto j = to_json(r);
  EXPECT_EQ(j["verdict"], "remainder_too_large");
  EXPECT_TRUE(j["constants"].contains("A0"));
  EXPECT_TRUE(j["constants"]["bound_terms"].contains("ims_rho"));
  EXPECT_TRUE(j["numeric"].contains("numeric_gap"));
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
}
