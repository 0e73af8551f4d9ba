// Acceptance criteria 1-9. One PASS/FAIL line per criterion; exit status 0 iff all requested pass.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <boost/math/quadrature/ooura_fourier_integrals.hpp>

#include "trapcert/report.hpp"

using namespace trapcert;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (detail.tellp() > 0) detail << "; ";
    detail << what << (ok ? "" : " [miss]");
  }
};

std::string g(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

ExtensionCache& cache() {
  static ExtensionCache c;
  return c;
}

// ---------------------------------------------------------------- 1
Outcome kernel_identities() {
  Outcome o;
  const auto mass = kernel_normalization_check(20260);
  o.check(mass.pass, "unit mass max err " + g(mass.value));

  double worst = 0;
  for (double x : {-30.0, -2.0, -0.5, 0.0, 0.1, 1.0, 12.0})
    for (double y : {1e-4, 0.05, 1.0, 30.0})
      worst = std::max(worst, std::abs(poisson_kernel(0.5, x, y) - y / (std::numbers::pi * (x * x + y * y))));
  o.check(worst <= 1e-12, "P_1/2 pointwise " + g(worst));

  // unitary transform of the unnormalized kernel y/(x^2+y^2); the normalized one carries an extra 1/pi
  boost::math::quadrature::ooura_fourier_cos<double> oc;
  double w_raw = 0, w_norm = 0;
  for (double y : {0.5, 1.0, 2.0})
    for (double xi : {0.25, 1.0, 3.0}) {
      const double half = oc.integrate([&](double x) { return y / (x * x + y * y); }, xi).first;
      const double raw = 2.0 * half / std::sqrt(2 * std::numbers::pi);
      w_raw = std::max(w_raw, std::abs(raw - std::sqrt(std::numbers::pi / 2) * std::exp(-y * xi)));
      w_norm = std::max(w_norm, std::abs(raw / std::numbers::pi - std::exp(-y * xi) / std::sqrt(2 * std::numbers::pi)));
    }
  o.check(w_raw <= 1e-10, "transform sqrt(pi/2) e^{-y|xi|} " + g(w_raw));
  o.check(w_norm <= 1e-10, "normalized kernel transform " + g(w_norm));
  return o;
}

// ---------------------------------------------------------------- 2
Outcome c_alpha_continuity() {
  Outcome o;
  const auto ch = c_half_check();
  o.check(ch.pass, "|c_1/2 - 1| = " + g(ch.value));
  std::vector<double> c;
  const double d = 0.4 / 49.0;
  for (int i = 0; i < 50; ++i) c.push_back(c_alpha(0.3 + d * i));
  double worst = 0;
  for (int i = 1; i + 1 < 50; ++i) {
    const double d1 = c[i + 1] - c[i], d0 = c[i] - c[i - 1];
    worst = std::max(worst, std::abs(d1 - d0) / std::abs(d0));
  }
  o.check(worst < 0.1, "ladder second/first difference " + g(worst));
  double near = 0;
  for (double eps : {1e-4, 1e-7, 1e-10})
    near = std::max({near, std::abs(c_alpha(0.5 - eps) - 1) / eps, std::abs(c_alpha(0.5 + eps) - 1) / eps});
  o.check(near < 10, "|c(1/2 +- e) - 1|/e " + g(near));
  return o;
}

// ---------------------------------------------------------------- 3
Outcome flattening() {
  Outcome o;
  for (double al : {0.25, 0.75}) {
    const auto f = flattening_check(31, al);
    o.check(f.pass, "alpha " + g(al) + " rel diff " + g(f.value));
  }
  return o;
}

// ---------------------------------------------------------------- 4
Outcome cross_section() {
  Outcome o;
  double worst = 0;
  for (double al : {0.25, 0.5, 0.75})
    for (double a : {0.5, 1.0}) {
      const double lg = solve_cross_section(al, a).lambda1;
      const double lc = solve_cross_section_collocation(al, a).lambda1;
      worst = std::max(worst, std::abs(lg - lc) / lg);
    }
  o.check(worst < 5e-4, "Galerkin vs collocation rel " + g(worst));
  const auto dl = dilation_check();
  o.check(dl.pass, "dilation " + g(dl.value));
  return o;
}

// ---------------------------------------------------------------- 5
Outcome decay() {
  Outcome o;
  {
    auto ev = cache().evaluator(0.25, 0.5);
    const auto d = decay_diagnostics(extend(ev, make_n_grid(0.5, 2.0), make_y_grid(0.25, 0.5, 1e4, true)));
    o.check(std::abs(d.slope + 1) <= 0.05, "slope(1/4) " + g(d.slope));
  }
  {
    auto ev = cache().evaluator(0.5, 0.5);
    const auto d = decay_diagnostics(extend(ev, make_n_grid(0.5, 2.0), make_y_grid(0.5, 0.5, 2e3, true)));
    o.check(d.log_fit_r2 >= 0.99, "log fit R2(1/2) " + g(d.log_fit_r2));
  }
  const auto chi = CutoffProfile::smooth_step();
  {
    auto ev = cache().evaluator(0.25, 0.5);
    std::vector<double> kt;
    for (double tau : {100.0, 200.0, 400.0}) {
      const auto f = make_field(ev, 1e8, tau);
      kt.push_back(k_integrals(f, chi, 1e8, tau).K_tau_prime);
    }
    double worst = 0;
    for (std::size_t i = 0; i + 1 < kt.size(); ++i)
      worst = std::max(worst, std::abs(kt[i] / kt[i + 1] / std::pow(2.0, 1.5) - 1));
    o.check(worst <= 0.1, "K'_tau doubling vs 2^1.5 " + g(worst));
  }
  {
    auto ev = cache().evaluator(0.5, 0.5);
    double ratio = 0;
    for (double tau : {20.0, 200.0}) {
      const auto f = make_field(ev, 1e6, tau);
      ratio = std::max(ratio, k_integrals(f, chi, 1e6, tau).K_tau_prime / tau_envelope(ev->pair(), chi, tau));
    }
    o.check(ratio <= 1, "K'_tau / log envelope(1/2) " + g(ratio));
  }
  return o;
}

// ---------------------------------------------------------------- 6
TrialParameters scaled(double theta, double rho, double ell, double L) {
  TrialParameters p;
  p.theta = theta;
  p.rho = rho;
  p.epsilon = theta / rho;
  p.ell = ell;
  p.L = L;
  return p;
}

KIntegrals k_stub(double rho, const CutoffProfile& chi, double K) {
  KIntegrals k;
  k.K = K;
  k.K_rho_prime = 0.01;
  k.rho = rho;
  k.cutoff_id = chi.id();
  return k;
}

Outcome criterion_algebra() {
  Outcome o;
  const auto chi = CutoffProfile::smooth_step();
  const auto pair = solve_cross_section(0.5, 0.5, 16);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  const std::vector<ProfileShape> list{shapes::smooth_bump(), shapes::plateau_bump(), shapes::poly_c1(),
                                       shapes::oscillating(12.0)};
  int mismatch = 0, holds = 0;
  for (int d = 0; d < 50; ++d) {
    const auto& sh = list[d % list.size()];
    const double theta = 0.05 + 0.9 * u(rng), rho = 1.0 + 9.0 * u(rng);
    const double ell = rho * sh.ell_over_rho_threshold(theta) * std::exp(std::log(3.0) * (2 * u(rng) - 1));
    const TubularGeometry geom(CurvatureProfile::scaled(sh, theta / rho, ell), 0.5, rho);
    const auto p = scaled(theta, rho, ell, 2 * ell);
    const auto r = criterion(geom, p);
    const auto c = constants(geom, pair, k_stub(rho, chi, 0.5 + u(rng)), chi, p);
    if (std::abs(r.lhs / r.rhs - 1) > 1e-12 && r.holds != (c.C0_prime > c.B0)) ++mismatch;
    holds += r.holds;
  }
  o.check(mismatch == 0, std::to_string(mismatch) + "/50 draws disagree (" + std::to_string(holds) + " hold)");

  const auto p75 = solve_cross_section(0.75, 0.5, 16);
  double worst = 0;
  for (const auto& sh : {shapes::smooth_bump(), shapes::plateau_bump(), shapes::oscillating(20.0)})
    for (double theta : {0.2, 0.5, 0.8})
      for (double ratio : {3.0, 30.0, 300.0}) {
        const double rho = 2.0, ell = ratio * rho;
        const TubularGeometry geom(CurvatureProfile::scaled(sh, theta / rho, ell), 0.5, rho);
        const auto c = constants(geom, p75, k_stub(rho, chi, 1.3), chi, scaled(theta, rho, ell, 2 * ell));
        const double closed =
            std::pow(1 - theta, 4) / (2 * (1 + theta) * (1 + theta)) * sh.c_kappa / sh.c_kappa_prime * ratio * ratio;
        worst = std::max(worst, std::abs(c.C0_prime / c.B0 / closed - 1));
      }
  o.check(worst <= 1e-10, "C0'/B0 closed form rel " + g(worst));
  return o;
}

// ---------------------------------------------------------------- 7
const CertificateReport& witness() {
  static const CertificateReport r = select_parameters(shapes::smooth_bump(), 0.75, 0.5, 0.5, {}, &cache());
  return r;
}

Outcome witness_certificate() {
  Outcome o;
  const auto& r = witness();
  o.check(r.verdict == Verdict::certified, std::string("verdict ") + to_string(r.verdict));
  o.check(r.analytic_gap < 0, "analytic gap " + g(r.analytic_gap));
  if (r.numeric) {
    const double slack = r.analytic_gap + 1e-6 * r.lambda1 - r.numeric->numeric_gap;
    o.check(slack >= 0, "numeric gap " + g(r.numeric->numeric_gap) + " within analytic + 1e-6 lambda1");
  } else {
    o.check(false, "no direct quotient");
  }
  o.detail << "; rho " << g(r.parameters.rho) << " ell " << g(r.parameters.ell);
  return o;
}

// ---------------------------------------------------------------- 8
Outcome oracle_crosscheck() {
  Outcome o;
  const auto& w = witness();
  const double a = 0.5, h = 2 * a / 16;
  bool rasterized = false;
  std::string why;
  try {
    const TubularGeometry geom(CurvatureProfile::scaled(shapes::smooth_bump(), w.parameters.epsilon, w.parameters.ell),
                               a, w.parameters.rho);
    rasterize_waveguide(geom, a, h);
    rasterized = true;
  } catch (const Error& e) {
    why = e.what();
  }
  o.check(rasterized, "witness geometry at h=1/16: " + (rasterized ? std::string("rasterized") : why));
  const double floor = std::numeric_limits<double>::epsilon() * w.lambda1;
  o.check(std::abs(w.analytic_gap) > floor,
          "witness gap " + g(w.analytic_gap) + " vs double resolution " + g(floor));

  // the oracle itself, on a straight guide and on a sharply bent one
  const auto pair = solve_cross_section(0.75, a);
  const auto st = run_oracle_study(bend_with_turning(shapes::smooth_bump(), a, 1.9, 2.5, 0.513), pair, 1.0 / 32, 5.0);
  o.check(st.straight_verdict == OracleVerdict::none_below_threshold,
          std::string("straight ") + to_string(st.straight_verdict));
  o.detail << "; sharp bend " << to_string(st.bent_verdict) << " (q=" << g(st.bent.back().values[0])
           << ", lambda1=" << g(pair.lambda1) << ")";
  return o;
}

// ---------------------------------------------------------------- 9
Outcome negative_controls() {
  Outcome o;
  for (double al : {0.25, 0.5, 0.75}) {
    TrialParameters p = scaled(0.5, 2.0, 10.0, 1000.0);
    p.theta = p.epsilon = 0;
    if (al <= 0.5) p.tau = 16.0;
    const auto r =
        evaluate_configuration(CurvatureProfile::zero(p.ell), CutoffProfile::smooth_step(), p, cache().evaluator(al, 0.5), &cache());
    const double gap = r.numeric ? r.numeric->numeric_gap : -1;
    o.check(r.verdict != Verdict::certified && gap >= -1e-8,
            "straight alpha " + g(al) + ": " + to_string(r.verdict) + ", numeric gap " + g(gap));
  }
  const fs::path dir = fs::temp_directory_path() / "trapcert_acceptance_osc";
  fs::remove_all(dir);
  const RunConfig c = parse_config(R"({
    "mode": "sweep", "alpha": 0.75, "a": 0.5, "seed": 1,
    "profile": {"shape": "oscillating", "omega": 40},
    "certify": {"theta": 0.5},
    "sweep": {"multiples": [0.5, 1.0, 2.0, 4.0], "reference_shape": "smooth_bump"}})");
  const RunOutcome out = run(c, dir, DiskCache(std::nullopt));
  int bad = 0, n = 0;
  for (const auto& pt : out.report["result"]["points"]) {
    ++n;
    if (pt["verdict"] != "criterion_failed") ++bad;
  }
  o.check(n == 4 && bad == 0, "oscillating sweep " + std::to_string(n - bad) + "/" + std::to_string(n) + " criterion_failed");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Outcome()>> all{kernel_identities, c_alpha_continuity, flattening,
                                                  cross_section,     decay,              criterion_algebra,
                                                  witness_certificate, oracle_crosscheck, negative_controls};
  bool ok = true;
  for (int i = 1; i <= 9; ++i) {
    if (only && i != only) continue;
    Outcome o;
    try {
      o = all[i - 1]();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::printf("Criterion %d: %s: %s\n", i, o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
    std::fflush(stdout);
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
