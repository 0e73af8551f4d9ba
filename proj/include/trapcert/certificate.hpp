#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "trapcert/cross_section.hpp"
#include "trapcert/errors.hpp"
#include "trapcert/extension.hpp"
#include "trapcert/geometry.hpp"
#include "trapcert/kernels.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

// ------------------------------------------------------------ parameters

/** \brief One trial function: superstrip, amplitude, bend scale, s-cutoff length, y-cutoff. */
struct TrialParameters {
  double theta = 0;
  double rho = 0;
  double epsilon = 0;
  double ell = 0;
  double L = 0;
  std::optional<double> tau;
  std::string cutoff_id = "smooth_step";
};

/** Summands of the upper bound on Q - lambda1. */
struct BoundTerms {
  double s_cutoff = 0;        // A0 / L^2
  double gauge = 0;           // B0 / L
  double ims_rho = 0;         // c K'_rho
  double ims_tau = 0;         // c K'_tau (alpha <= 1/2)
  double curvature_gain = 0;  // -C0' / L
  // explicit envelope for c K'_tau and whether the measured value sits below it
  double tau_envelope = 0;
  bool tau_within_envelope = true;

  double total() const { return s_cutoff + gauge + ims_rho + ims_tau + curvature_gain; }
};

struct CertificateConstants {
  double c_alpha = 0;
  double theta = 0;
  double J_plus = 1;
  double C_A = 0;
  double A0 = 0, B0 = 0, C0_prime = 0;
  double K = 0, K_rho_prime = 0, K_tau_prime = 0;
  double chi_l2_sq = 0, chi_prime_l2_sq = 0, chi_prime_sup = 0;
  double kappa_l2_sq = 0, kappa_prime_l2_sq = 0, kappa_sup = 0;
  std::optional<double> L_star;  // only when C0' > B0
  BoundTerms bound_terms;        // filled by assemble_bound
};

struct CriterionResult {
  double lhs = 0;  // ||kappa|| / ||kappa'||
  double rhs = 0;  // sqrt(2) rho (1+theta) / (1-theta)^2
  bool holds = false;
  bool degenerate = false;  // kappa == 0
};

struct DirectRayleigh {
  double numeric_gap = 0;
  double error_estimate = 0;
  double s_term = 0;    // c I_s / mass
  double v_term = 0;    // c I_V / mass
  double ims_term = 0;  // c (E[chi U1] - E[U1]) restricted to where the cutoffs act
  double mass = 0;
  double mass_expected = 0;  // L ||chi||^2
};

enum class Verdict { certified, criterion_failed, remainder_too_large, invalid_geometry };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::certified: return "certified";
    case Verdict::criterion_failed: return "criterion_failed";
    case Verdict::remainder_too_large: return "remainder_too_large";
    case Verdict::invalid_geometry: return "invalid_geometry";
  }
  return "?";
}

struct SearchStep {
  double rho = 0, tau = 0, L = 0;
  double ims_rho = 0, ims_rho_share = 0;
  double ims_tau = 0, ims_tau_share = 0;
};

struct CertificateReport {
  double alpha = 0, a = 0;
  std::string shape_id;
  TrialParameters parameters;
  CertificateConstants constants;
  CriterionResult criterion;
  double analytic_gap = 0;
  std::optional<DirectRayleigh> numeric;
  Verdict verdict = Verdict::criterion_failed;
  std::string binding_constraint;
  SuperstripReport geometry;
  double lambda1 = 0, lambda1_error = 0;
  bool gap_below_eigen_resolution = false;
  int rounds = 0;
  std::vector<SearchStep> trace;
};

inline Regime regime_of(double alpha) { return FractionalOrder(alpha).regime; }

// ---------------------------------------------------------------- cache

/** \brief Eigenpairs, evaluators and fields shared across runs. Reads are concurrent, inserts serialized. */
class ExtensionCache {
 public:
  std::shared_ptr<const ExtensionEvaluator> evaluator(double alpha, double a,
                                                      int resolution = kDefaultCrossSectionResolution) {
    const auto key = std::make_tuple(alpha, a, resolution);
    {
      std::lock_guard<std::mutex> lock(m_);
      auto it = evals_.find(key);
      if (it != evals_.end()) return it->second;
    }
    auto ev = std::make_shared<const ExtensionEvaluator>(solve_cross_section(alpha, a, resolution));
    std::lock_guard<std::mutex> lock(m_);
    return evals_.emplace(key, ev).first->second;
  }

  std::shared_ptr<const ExtensionField> field(const std::shared_ptr<const ExtensionEvaluator>& ev, double rho,
                                              std::optional<double> tau) {
    const auto key = std::make_tuple(ev.get(), rho, tau.value_or(-1.0));
    {
      std::lock_guard<std::mutex> lock(m_);
      auto it = fields_.find(key);
      if (it != fields_.end()) return it->second;
    }
    auto f = std::make_shared<const ExtensionField>(make_field(ev, rho, tau));
    std::lock_guard<std::mutex> lock(m_);
    return fields_.emplace(key, f).first->second;
  }

  /** Seeds the evaluator for (alpha, a, resolution) with an eigenpair solved elsewhere. */
  std::shared_ptr<const ExtensionEvaluator> preload(CrossSectionEigenpair pair) {
    const auto key = std::make_tuple(pair.alpha(), pair.a, pair.resolution);
    auto ev = std::make_shared<const ExtensionEvaluator>(std::move(pair));
    std::lock_guard<std::mutex> lock(m_);
    return evals_.emplace(key, ev).first->second;
  }

  void clear_fields() {
    std::lock_guard<std::mutex> lock(m_);
    fields_.clear();
  }

 private:
  std::mutex m_;
  std::map<std::tuple<double, double, int>, std::shared_ptr<const ExtensionEvaluator>> evals_;
  std::map<std::tuple<const ExtensionEvaluator*, double, double>, std::shared_ptr<const ExtensionField>> fields_;
};

// ------------------------------------------------------------ criterion

inline CriterionResult criterion(const TubularGeometry& geom, const TrialParameters& params) {
  const double theta = geom.theta();
  if (!(theta < 1.0)) throw PreconditionError("criterion: rho sup|kappa| must be below 1", theta);
  if (std::abs(geom.rho() - params.rho) > 1e-12 * params.rho)
    throw ConfigurationError("criterion: geometry and parameters disagree on rho");
  const auto& p = geom.profile();
  CriterionResult r;
  r.rhs = std::sqrt(2.0) * geom.rho() * (1.0 + theta) / ((1.0 - theta) * (1.0 - theta));
  if (p.is_zero() || p.l2_kappa() == 0.0) {
    r.degenerate = true;
    r.lhs = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  r.lhs = p.l2_kappa_prime() > 0 ? std::sqrt(p.l2_kappa() / p.l2_kappa_prime()) : std::numeric_limits<double>::infinity();
  r.holds = r.lhs > r.rhs;
  return r;
}

// ------------------------------------------------------------ constants

inline CertificateConstants constants(const TubularGeometry& geom, const CrossSectionEigenpair& pair,
                                      const KIntegrals& k, const CutoffProfile& chi, const TrialParameters& params) {
  auto mismatch = [](double x, double y) { return std::abs(x - y) > 1e-12 * std::max(std::abs(x), std::abs(y)); };
  if (mismatch(k.rho, params.rho) || mismatch(geom.rho(), params.rho))
    throw ConfigurationError("constants: rho differs between field, geometry and parameters");
  if (k.has_tau != params.tau.has_value() || (k.has_tau && mismatch(k.tau, *params.tau)))
    throw ConfigurationError("constants: tau differs between field and parameters");
  if (k.cutoff_id != chi.id() || chi.id() != params.cutoff_id)
    throw ConfigurationError("constants: cutoff id differs between field and parameters");
  if (std::abs(geom.half_width() - pair.a) > 1e-12 * pair.a)
    throw ConfigurationError("constants: geometry and eigenpair disagree on a");
  const double theta = geom.theta();
  if (!(theta < 1.0)) throw PreconditionError("constants: rho sup|kappa| must be below 1", theta);
  if (mismatch(theta, params.theta) && !(theta == 0 && params.theta == 0))
    throw ConfigurationError("constants: theta differs from rho sup|kappa|");

  CertificateConstants c;
  c.c_alpha = c_alpha(pair.alpha());
  c.theta = theta;
  c.J_plus = 1.0 / ((1.0 - theta) * (1.0 - theta));
  c.C_A = params.rho / (2.0 * (1.0 - theta));
  c.K = k.K;
  c.K_rho_prime = k.K_rho_prime;
  c.K_tau_prime = k.K_tau_prime;
  c.chi_l2_sq = chi.norm_l2_sq();
  c.chi_prime_l2_sq = chi.norm_l2_sq_deriv();
  c.chi_prime_sup = chi.sup_deriv();
  const auto& p = geom.profile();
  c.kappa_l2_sq = p.l2_kappa();
  c.kappa_prime_l2_sq = p.l2_kappa_prime();
  c.kappa_sup = p.sup_norm();
  const double r = c.c_alpha * c.K / c.chi_l2_sq;
  c.A0 = 2.0 * r * c.J_plus * c.chi_prime_l2_sq;
  c.B0 = 2.0 * r * c.J_plus * c.C_A * c.C_A * c.kappa_prime_l2_sq;
  c.C0_prime = r * c.kappa_l2_sq / (4.0 * (1.0 + theta) * (1.0 + theta));
  if (c.C0_prime > c.B0) c.L_star = 4.0 * c.A0 / (c.C0_prime - c.B0);
  return c;
}

// ------------------------------------------------------------ tau envelope

/**
 * Explicit upper bound for c K'_tau.
 * alpha < 1/2: C_P^2 B(1/2, 1/2+2a) ||u1||_1^2 2^{2a-1} ||chi'||_inf^2 / tau^{1+2a}.
 * alpha = 1/2: ||chi'||_inf^2 / tau^2 times the L2 norm of U1 over R x (0,tau).
 */
inline double tau_envelope(const CrossSectionEigenpair& p, const CutoffProfile& chi, double tau) {
  const double al = p.alpha();
  const double s2 = chi.sup_deriv() * chi.sup_deriv();
  const double c = c_alpha(al);
  if (al < 0.5) {
    const double cp = poisson_constant(al);
    const double beta = std::sqrt(std::numbers::pi) * std::tgamma(0.5 + 2 * al) / std::tgamma(1.0 + 2 * al);
    const double m = p.integral_abs();
    return c * cp * cp * beta * m * m * std::pow(2.0, 2 * al - 1) * s2 / std::pow(tau, 1 + 2 * al);
  }
  if (al == 0.5) {
    // int_0^tau ||U1(.,y)||^2 dy = 2 int_0^inf |Fu1|^2 (1 - e^{-2 tau xi}) / (2 xi) dxi
    // geometric panels from 1/tau up to the u1 scale, uniform beyond
    const double width = std::numbers::pi / (4.0 * p.a), xmax = 400.0 / p.a;
    std::vector<double> br{0.0};
    for (double x = std::min(1.0 / tau, width); x < width; x *= 2) br.push_back(x);
    for (double x = width; x < xmax; x += width) br.push_back(x);
    br.push_back(xmax);
    const Rule r = composite_rule(br, 16);
    double s = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double xi = r.x[i], fu = p.fourier(xi);
      s += r.w[i] * fu * fu * -std::expm1(-2 * tau * xi) / xi;
    }
    return c * s2 / (tau * tau) * s;
  }
  return 0.0;
}

// ------------------------------------------------------------ bound

inline BoundTerms assemble_bound(CertificateConstants& c, const TrialParameters& params, Regime regime,
                                 const CrossSectionEigenpair* pair = nullptr, const CutoffProfile* chi = nullptr) {
  if (params.L < 2.0 * params.ell * (1 - 1e-14))
    throw PreconditionError("assemble_bound: L must be at least 2 ell", params.L);
  if ((regime == Regime::high) == params.tau.has_value())
    throw ConfigurationError("assemble_bound: tau must be present exactly when alpha <= 1/2");
  BoundTerms b;
  const double L = params.L;
  b.s_cutoff = c.A0 / (L * L);
  b.gauge = c.B0 / L;
  b.ims_rho = c.c_alpha * c.K_rho_prime;
  b.curvature_gain = -c.C0_prime / L;
  if (params.tau) {
    b.ims_tau = c.c_alpha * c.K_tau_prime;
    if (pair && chi) {
      b.tau_envelope = tau_envelope(*pair, *chi, *params.tau);
      b.tau_within_envelope = b.ims_tau <= b.tau_envelope * (1 + 1e-9);
    }
  }
  c.bound_terms = b;
  return b;
}

// ------------------------------------------------------------ direct quadrature

namespace detail {

// Gauss rule for y^e dy on (0, y0)
inline Rule power_weight_rule(int n, double e, double y0) {
  const Rule ref = gauss_jacobi(n, 0.0, e);
  Rule r;
  const double f = std::pow(0.5 * y0, e + 1.0);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    r.x.push_back(0.5 * y0 * (1.0 + ref.x[i]));
    r.w.push_back(f * ref.w[i]);
  }
  return r;
}

// s breakpoints: the bend, the plateau gap, the chi_L transitions
inline std::vector<double> s_breaks(double ell, double L, int bend_panels = 64, int transition_panels = 32) {
  std::vector<double> br;
  for (int i = 0; i <= transition_panels; ++i) br.push_back(-L + 0.5 * L * i / transition_panels);
  if (0.5 * L > ell * (1 + 1e-12)) br.push_back(-ell);
  for (int i = 1; i <= bend_panels; ++i) br.push_back(-ell + 2.0 * ell * i / bend_panels);
  if (0.5 * L > ell * (1 + 1e-12)) br.push_back(0.5 * L);
  for (int i = 1; i <= transition_panels; ++i) br.push_back(0.5 * L + 0.5 * L * i / transition_panels);
  std::sort(br.begin(), br.end());
  br.erase(std::unique(br.begin(), br.end()), br.end());
  return br;
}

/**
 * int over the region where a cutoff acts of y^{1-2a} (|grad(chi_rho chi_tau U1)|^2 - |grad U1|^2), n > 0 half.
 * Region: n > rho/2 (all y), plus n < rho/2, y > tau/2.
 */
inline double cutoff_energy_half(const ExtensionEvaluator& ev, const CutoffProfile& chi, double rho,
                                 std::optional<double> tau, int order) {
  const double al = ev.alpha(), e = 1.0 - 2.0 * al;
  const ScaledCutoff cr = cutoff_rescale(chi, rho);
  std::optional<ScaledCutoff> ct;
  if (tau) ct = cutoff_rescale(chi, *tau);
  const double far = 1e4 * std::max(rho, tau.value_or(0.0));
  auto integrand = [&](double n, double y) {
    const KernelSample g = ev.gradient(n, y);
    const double cn = cr(n), dcn = cr.deriv(n);
    const double cy = ct ? (*ct)(y) : 1.0, dcy = ct ? ct->deriv(y) : 0.0;
    const double pn = dcn * cy * g.value + cn * cy * g.dx;
    const double py = cn * dcy * g.value + cn * cy * g.dy;
    return pn * pn + py * py - g.dx * g.dx - g.dy * g.dy;
  };
  const Rule& gl = gauss_legendre(order);
  auto panels = [&](const std::vector<double>& br) {
    Rule r;
    for (std::size_t p = 0; p + 1 < br.size(); ++p) {
      const Rule m = map_rule(gl, br[p], br[p + 1]);
      r.x.insert(r.x.end(), m.x.begin(), m.x.end());
      r.w.insert(r.w.end(), m.w.begin(), m.w.end());
    }
    return r;
  };

  // n > rho/2: graded toward rho/2, 8 panels to rho, geometric beyond
  std::vector<double> nb;
  const double h = 0.5 * rho;
  for (int k = 12; k >= 1; --k) nb.push_back(h + std::ldexp(h / 8, -2 * k));
  for (int i = 0; i <= 8; ++i) nb.push_back(h + h * i / 8.0);
  for (double x = 2 * rho; x <= far; x *= 2) nb.push_back(x);
  std::sort(nb.begin(), nb.end());
  const Rule rn = panels(nb);
  // y: weighted first panel (the integrand behaves like y^{2a-1} at y = 0), then geometric
  const double y0 = std::ldexp(rho, -30);
  const Rule first = power_weight_rule(order, 2 * al - 1, y0);
  std::vector<double> yb;
  for (double y = y0; y < far; y *= 4) yb.push_back(y);
  yb.push_back(far);
  if (tau)
    for (int i = 0; i <= 8; ++i) yb.push_back(0.5 * *tau * (1.0 + i / 8.0));
  std::sort(yb.begin(), yb.end());
  yb.erase(std::unique(yb.begin(), yb.end()), yb.end());
  const Rule ry = panels(yb);
  double s = 0;
  for (std::size_t i = 0; i < rn.size(); ++i) {
    const double n = rn.x[i];
    double col = 0;
    for (std::size_t j = 0; j < first.size(); ++j) {
      const double y = first.x[j];
      col += first.w[j] * std::pow(y, 2 - 4 * al) * integrand(n, y);
    }
    for (std::size_t j = 0; j < ry.size(); ++j) col += ry.w[j] * std::pow(ry.x[j], e) * integrand(n, ry.x[j]);
    s += rn.w[i] * col;
  }
  if (tau) {
    // n < rho/2, y > tau/2
    std::vector<double> nb2;
    for (int i = 0; i <= 8; ++i) nb2.push_back(h * i / 8.0);
    const Rule rn2 = panels(nb2);
    std::vector<double> yb2;
    for (int i = 0; i <= 8; ++i) yb2.push_back(0.5 * *tau * (1.0 + i / 8.0));
    for (double y = 2 * *tau; y < far; y *= 2) yb2.push_back(y);
    yb2.push_back(far);
    const Rule ry2 = panels(yb2);
    for (std::size_t i = 0; i < rn2.size(); ++i)
      for (std::size_t j = 0; j < ry2.size(); ++j)
        s += rn2.w[i] * ry2.w[j] * std::pow(ry2.x[j], e) * integrand(rn2.x[i], ry2.x[j]);
  }
  return s;
}

}  // namespace detail

/**
 * Rayleigh quotient of chi_L(s) chi_rho(n) [chi_tau(y)] U1(n,y) in flattened
 * coordinates minus lambda1. The s-integrals run over the full flattened
 * integrand; the n,y energy is lambda1 plus the energy change where the
 * cutoffs act, computed from gradients of U1.
 */
inline DirectRayleigh direct_rayleigh(const TubularGeometry& geom, const ExtensionField& field,
                                      const CutoffProfile& chi, const TrialParameters& params) {
  const auto& pair = field.pair();
  if (std::abs(geom.rho() - params.rho) > 1e-12 * params.rho || std::abs(field.n_grid.hi - params.rho) > 1e-12 * params.rho)
    throw ConfigurationError("direct_rayleigh: rho differs between geometry, field and parameters");
  if (params.tau.has_value() != (regime_of(pair.alpha()) != Regime::high))
    throw ConfigurationError("direct_rayleigh: tau must be present exactly when alpha <= 1/2");
  if (params.L < 2.0 * params.ell * (1 - 1e-14) || geom.profile().support_radius() > params.ell * (1 + 1e-12))
    throw PreconditionError("direct_rayleigh: needs supp kappa in [-ell, ell] and L >= 2 ell", params.L);
  if (chi.id() != params.cutoff_id) throw ConfigurationError("direct_rayleigh: cutoff id mismatch");
  const double c = c_alpha(pair.alpha());
  const ScaledCutoff cr = cutoff_rescale(chi, params.rho);
  const ScaledCutoff cl = cutoff_rescale(chi, params.L);
  const std::vector<double> G = y_profile(field, chi, params.tau);

  // n-mass of chi_rho u1
  double mass_n = 0;
  {
    const Rule q = gauss_jacobi(64, 2 * pair.alpha(), 2 * pair.alpha());
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double n = pair.a * q.x[i], v = pair.poly(q.x[i]);
      mass_n += q.w[i] * cr(n) * cr(n) * v * v;
    }
  }

  struct STerms {
    double Is = 0, IV = 0, ms = 0;
  };
  auto s_integrals = [&](int order) {
    const Rule rs = composite_rule(detail::s_breaks(params.ell, params.L), order);
    STerms t;
    for (std::size_t k = 0; k < rs.size(); ++k) {
      const double s = rs.x[k];
      const double x = cl(s), dx = cl.deriv(s);
      t.ms += rs.w[k] * x * x;
      double is = 0, iv = 0;
      for (std::size_t i = 0; i < field.n_grid.size(); ++i) {
        const double n = field.n_grid.x[i];
        const double w = 0.5 * field.n_grid.w[i] * cr(n) * cr(n) * G[i];
        for (double sn : {n, -n}) {
          const double J = geom.jacobian(s, sn);
          const double q = dx + geom.gauge_A(s, sn) * x;
          is += w * q * q / (J * J);
          iv += w * geom.potential_V(s, sn) * x * x;
        }
      }
      t.Is += rs.w[k] * is;
      t.IV += rs.w[k] * iv;
    }
    return t;
  };
  const STerms hi = s_integrals(16), lo = s_integrals(12);
  const auto& ev = *field.eval;
  const double dE_hi = 2.0 * detail::cutoff_energy_half(ev, chi, params.rho, params.tau, 14);
  const double dE_lo = 2.0 * detail::cutoff_energy_half(ev, chi, params.rho, params.tau, 10);

  DirectRayleigh d;
  d.mass = hi.ms * mass_n;
  d.mass_expected = params.L * chi.norm_l2_sq();
  d.s_term = c * hi.Is / d.mass;
  d.v_term = c * hi.IV / d.mass;
  d.ims_term = c * dE_hi / mass_n;
  d.numeric_gap = d.s_term + d.v_term + d.ims_term;
  const double lo_gap = c * (lo.Is + lo.IV) / (lo.ms * mass_n) + c * dE_lo / mass_n;
  // y-truncation of G relative to its total; the energy change is cut at 1e4 max(rho, tau)
  double g_total = 0;
  for (std::size_t i = 0; i < G.size(); ++i) g_total += field.n_grid.w[i] * cr(field.n_grid.x[i]) * cr(field.n_grid.x[i]) * G[i];
  const double y_rel = params.tau ? 0.0 : field.y_tail_bound / g_total;
  d.error_estimate = std::abs(d.numeric_gap - lo_gap) + (std::abs(d.s_term) + std::abs(d.v_term)) * y_rel +
                     std::abs(d.ims_term) * std::pow(1e-4, 1 + 2 * pair.alpha()) +
                     64 * std::numeric_limits<double>::epsilon() * (std::abs(d.s_term) + std::abs(d.v_term) + std::abs(d.ims_term));
  if (!std::isfinite(d.numeric_gap)) throw NumericalError("direct_rayleigh: non-finite result");
  return d;
}

// ------------------------------------------------------------ flattening identity

namespace detail {

struct Dual {
  double v = 0, d = 0;
};
inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
inline Dual operator+(double a, Dual b) { return {a + b.v, b.d}; }
inline Dual dexp(Dual a) { return {std::exp(a.v), std::exp(a.v) * a.d}; }
inline Dual dcos(Dual a) { return {std::cos(a.v), -std::sin(a.v) * a.d}; }
inline Dual drsqrt(Dual a) { return {1 / std::sqrt(a.v), -0.5 * std::pow(a.v, -1.5) * a.d}; }
inline Dual dinv(Dual a) { return {1 / a.v, -a.d / (a.v * a.v)}; }

}  // namespace detail

struct FlatteningCheck {
  double physical = 0;
  double flattened = 0;
  double relative_difference = 0;
};

/**
 * Weighted energy of a random separable field Wt = f(s) g(n) h(y), once as
 * int y^{1-2a} (J^{-2} W_s^2 + W_n^2 + W_y^2) J with W = J^{-1/2} Wt (derivatives by
 * forward-mode differentiation), once in the flattened form with A and V.
 */
inline FlatteningCheck verify_flattening(const TubularGeometry& geom, double alpha, std::uint64_t seed) {
  check_alpha(alpha, "verify_flattening");
  using detail::Dual;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-0.5, 0.5);
  const double rho = geom.rho();
  const double ell = geom.profile().support_radius();
  const double S = ell + rho;
  double fa[3], fp[3];
  for (int k = 0; k < 3; ++k) fa[k] = 0.6 * U(rng), fp[k] = 6.0 * U(rng);
  const double b1 = U(rng), b2 = U(rng);
  const double beta = 1.0 + U(rng), gam = 0.5 + U(rng);

  auto f = [&](Dual s) {
    const Dual r = (1.0 / S) * s;
    const Dual q = 1.0 + Dual{-r.v * r.v, -2 * r.v * r.d};
    if (!(q.v > 0)) return Dual{0, 0};
    Dual env = dexp(1.0 + (-1.0) * detail::dinv(q));
    Dual tr{1, 0};
    for (int k = 0; k < 3; ++k) tr = tr + fa[k] * dcos((k + 1) * std::numbers::pi * r + Dual{fp[k], 0});
    return env * tr;
  };
  auto g = [&](Dual n) {
    const Dual t = (1.0 / rho) * n;
    return (1.0 + (-1.0) * (t * t)) * (1.0 + b1 * t + b2 * (t * t));
  };
  const auto& prof = geom.profile();
  auto J = [&](Dual s, Dual n) {
    const Dual k{prof.kappa(s.v), prof.kappa_prime(s.v) * s.d};
    return 1.0 + k * n;
  };
  // y-integrals of h = e^{-beta y}(1 + gam y) against y^p, p = 1-2a
  const double p = 1.0 - 2.0 * alpha;
  auto mom = [&](int k) { return std::tgamma(p + 1 + k) / std::pow(2 * beta, p + 1 + k); };
  const double H0 = mom(0) + 2 * gam * mom(1) + gam * gam * mom(2);
  const double H1 = (gam - beta) * (gam - beta) * mom(0) - 2 * (gam - beta) * beta * gam * mom(1) +
                    beta * beta * gam * gam * mom(2);

  std::vector<double> sb;
  for (int i = 0; i <= 48; ++i) sb.push_back(-S + 2 * S * i / 48.0);
  for (int i = 0; i <= 32; ++i) sb.push_back(-ell + 2 * ell * i / 32.0);
  std::sort(sb.begin(), sb.end());
  sb.erase(std::unique(sb.begin(), sb.end(), [](double x, double y) { return std::abs(x - y) < 1e-12; }), sb.end());
  const Rule rs = composite_rule(sb, 20);
  std::vector<double> nb;
  for (int i = 0; i <= 8; ++i) nb.push_back(-rho + 2 * rho * i / 8.0);
  const Rule rn = composite_rule(nb, 20);

  double phys = 0, flat = 0;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const double s = rs.x[i];
    const Dual fs = f({s, 1});
    for (std::size_t j = 0; j < rn.size(); ++j) {
      const double n = rn.x[j];
      const Dual gn = g({n, 1});
      // physical: W = J^{-1/2} f g, differentiated along s and along n
      const Dual Ws = detail::drsqrt(J({s, 1}, {n, 0})) * fs * Dual{gn.v, 0};
      const Dual Wn = detail::drsqrt(J({s, 0}, {n, 1})) * Dual{fs.v, 0} * gn;
      const double Jv = 1.0 + prof.kappa(s) * n;
      const double e_ph = Jv * (Ws.d * Ws.d / (Jv * Jv) + Wn.d * Wn.d) * H0 + Jv * Ws.v * Ws.v * H1;
      // flattened
      const double wt = fs.v * gn.v;
      const double Jg = geom.jacobian(s, n);
      const double q = fs.d * gn.v + geom.gauge_A(s, n) * wt;
      const double e_fl = (q * q / (Jg * Jg) + fs.v * fs.v * gn.d * gn.d + geom.potential_V(s, n) * wt * wt) * H0 + wt * wt * H1;
      phys += rs.w[i] * rn.w[j] * e_ph;
      flat += rs.w[i] * rn.w[j] * e_fl;
    }
  }
  FlatteningCheck r;
  r.physical = phys;
  r.flattened = flat;
  r.relative_difference = std::abs(phys - flat) / std::abs(phys);
  return r;
}

// ------------------------------------------------------------ evaluation at fixed parameters

struct EvaluateOptions {
  bool direct = true;
  bool validate_global = true;
};

/** Constants, bound and (optionally) the direct quotient for one parameter set. */
inline CertificateReport evaluate_configuration(const CurvatureProfile& profile, const CutoffProfile& chi,
                                                const TrialParameters& params,
                                                std::shared_ptr<const ExtensionEvaluator> ev, ExtensionCache* cache = nullptr,
                                                EvaluateOptions opt = {}) {
  const auto& pair = ev->pair();
  CertificateReport rep;
  rep.alpha = pair.alpha();
  rep.a = pair.a;
  rep.shape_id = profile.id();
  rep.parameters = params;
  rep.lambda1 = pair.lambda1;
  rep.lambda1_error = pair.error_estimate;
  const TubularGeometry geom(profile, pair.a, params.rho);
  rep.geometry = opt.validate_global ? geom.validate_superstrip() : SuperstripReport{};
  rep.geometry.theta = geom.theta();
  if (!(geom.theta() < 1.0)) {
    rep.verdict = Verdict::invalid_geometry;
    rep.binding_constraint = "theta";
    return rep;
  }
  rep.criterion = criterion(geom, params);
  std::shared_ptr<const ExtensionField> field =
      cache ? cache->field(ev, params.rho, params.tau)
            : std::make_shared<const ExtensionField>(make_field(ev, params.rho, params.tau));
  const KIntegrals k = k_integrals(*field, chi, params.rho, params.tau);
  rep.constants = constants(geom, pair, k, chi, params);
  assemble_bound(rep.constants, params, regime_of(pair.alpha()), &pair, &chi);
  rep.analytic_gap = rep.constants.bound_terms.total();
  rep.gap_below_eigen_resolution = std::abs(rep.analytic_gap) < pair.error_estimate;
  if (opt.direct) rep.numeric = direct_rayleigh(geom, *field, chi, params);
  if (!rep.criterion.holds) {
    rep.verdict = Verdict::criterion_failed;
    rep.binding_constraint = rep.criterion.degenerate ? "kappa_zero" : "curvature_criterion";
  } else if (rep.analytic_gap < 0) {
    rep.verdict = Verdict::certified;
  } else {
    rep.verdict = Verdict::remainder_too_large;
    const auto& b = rep.constants.bound_terms;
    rep.binding_constraint = b.ims_tau > b.ims_rho ? "K_tau_prime" : "K_rho_prime";
  }
  return rep;
}

// ------------------------------------------------------------ parameter search

struct SearchOptions {
  std::string cutoff_id = "smooth_step";
  double margin = 2.0;                     // ell/rho as a multiple of the threshold
  std::optional<double> ell_over_rho;      // overrides the margin policy
  std::optional<double> rho_start;         // default 2a
  std::optional<double> tau_start;         // default max(rho, 8a)
  bool freeze_tau = false;
  int max_rounds = 40;
  int resolution = kDefaultCrossSectionResolution;
  bool direct = true;
};

/**
 * Grows rho (factor 2; eps = theta/rho and ell, L rederived) and, below
 * alpha = 1/2, tau (factor 2) until c K'_rho <= (C0'-B0)/(8L) and
 * c K'_tau <= (C0'-B0)/(16L).
 */
inline CertificateReport select_parameters(const ProfileShape& shape, double alpha, double a, double theta,
                                           const SearchOptions& opt = {}, ExtensionCache* cache = nullptr) {
  check_alpha(alpha, "select_parameters");
  if (!(a > 0)) throw InputError("select_parameters: a must be positive");
  if (!(theta > 0 && theta < 1)) throw DomainError("select_parameters: theta must lie in (0,1)", theta);
  if (opt.max_rounds < 1) throw InputError("select_parameters: budget must allow one round");
  if (!(shape.c_kappa > 0) || !std::isfinite(shape.c_kappa_prime))
    throw InputError("select_parameters: shape norms must be finite and positive");
  ExtensionCache local;
  ExtensionCache& C = cache ? *cache : local;
  const CutoffProfile chi = CutoffProfile::by_id(opt.cutoff_id);
  auto ev = C.evaluator(alpha, a, opt.resolution);
  const bool needs_tau = regime_of(alpha) != Regime::high;
  const double ratio = opt.ell_over_rho.value_or(opt.margin * shape.ell_over_rho_threshold(theta));
  if (!(ratio > 0)) throw InputError("select_parameters: ell/rho must be positive");

  double rho = opt.rho_start.value_or(2.0 * a);
  if (rho < 2.0 * a * (1 - 1e-12)) throw PreconditionError("select_parameters: rho must be at least 2a", rho);
  std::optional<double> tau;
  if (needs_tau) tau = opt.tau_start.value_or(std::max(rho, 8.0 * a));

  auto params_for = [&](double r, std::optional<double> t, std::optional<double> L) {
    TrialParameters p;
    p.theta = theta;
    p.rho = r;
    p.epsilon = theta / r;
    p.ell = ratio * r;
    p.L = L.value_or(std::max(2.0 * p.ell, 1.0));
    p.tau = t;
    p.cutoff_id = opt.cutoff_id;
    return p;
  };

  CertificateReport rep;
  std::vector<SearchStep> trace;
  for (int round = 1; round <= opt.max_rounds; ++round) {
    TrialParameters p = params_for(rho, tau, std::nullopt);
    const CurvatureProfile prof = CurvatureProfile::scaled(shape, p.epsilon, p.ell);
    EvaluateOptions eo;
    eo.direct = false;
    eo.validate_global = false;
    rep = evaluate_configuration(prof, chi, p, ev, &C, eo);
    if (rep.verdict == Verdict::invalid_geometry || !rep.criterion.holds) {
      rep.rounds = round;
      break;
    }
    // L = max(2 ell, L*, 1), then the bound again
    p.L = std::max({2.0 * p.ell, *rep.constants.L_star, 1.0});
    rep.parameters = p;
    assemble_bound(rep.constants, p, regime_of(alpha), &ev->pair(), &chi);
    rep.analytic_gap = rep.constants.bound_terms.total();
    const auto& c = rep.constants;
    SearchStep st;
    st.rho = rho;
    st.tau = tau.value_or(0);
    st.L = p.L;
    st.ims_rho = c.bound_terms.ims_rho;
    st.ims_rho_share = (c.C0_prime - c.B0) / (8 * p.L);
    st.ims_tau = c.bound_terms.ims_tau;
    st.ims_tau_share = (c.C0_prime - c.B0) / (16 * p.L);
    trace.push_back(st);
    rep.rounds = round;
    const bool tau_ok = !needs_tau || st.ims_tau <= st.ims_tau_share;
    const bool rho_ok = st.ims_rho <= st.ims_rho_share;
    if (tau_ok && rho_ok) {
      rep.verdict = rep.analytic_gap < 0 ? Verdict::certified : Verdict::remainder_too_large;
      rep.binding_constraint = rep.verdict == Verdict::certified ? "" : "K_rho_prime";
      break;
    }
    rep.verdict = Verdict::remainder_too_large;
    if (!tau_ok) {
      rep.binding_constraint = "K_tau_prime";
      if (opt.freeze_tau) break;
      *tau *= 2.0;
      continue;
    }
    rep.binding_constraint = "K_rho_prime";
    rho *= 2.0;
    if (tau) tau = std::max(*tau, rho);
  }
  rep.trace = std::move(trace);
  const TrialParameters& p = rep.parameters;
  if (rep.verdict != Verdict::invalid_geometry) {
    const CurvatureProfile prof = CurvatureProfile::scaled(shape, p.epsilon, p.ell);
    const TubularGeometry geom(prof, a, p.rho);
    rep.geometry = geom.validate_superstrip();
    if (opt.direct) rep.numeric = direct_rayleigh(geom, *C.field(ev, p.rho, p.tau), chi, p);
  }
  rep.gap_below_eigen_resolution = std::abs(rep.analytic_gap) < ev->pair().error_estimate;
  return rep;
}

// ------------------------------------------------------------ serialization

inline nlohmann::json to_json(const TrialParameters& p) {
  nlohmann::json j{{"theta", p.theta}, {"rho", p.rho}, {"epsilon", p.epsilon}, {"ell", p.ell}, {"L", p.L},
                   {"cutoff_id", p.cutoff_id}};
  j["tau"] = p.tau ? nlohmann::json(*p.tau) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const BoundTerms& b) {
  return {{"s_cutoff", b.s_cutoff},       {"gauge", b.gauge},
          {"ims_rho", b.ims_rho},         {"ims_tau", b.ims_tau},
          {"curvature_gain", b.curvature_gain}, {"total", b.total()},
          {"tau_envelope", b.tau_envelope}, {"tau_within_envelope", b.tau_within_envelope}};
}

inline nlohmann::json to_json(const CertificateConstants& c) {
  nlohmann::json j{{"c_alpha", c.c_alpha},
                   {"theta", c.theta},
                   {"J_plus", c.J_plus},
                   {"C_A", c.C_A},
                   {"A0", c.A0},
                   {"B0", c.B0},
                   {"C0_prime", c.C0_prime},
                   {"K", c.K},
                   {"K_rho_prime", c.K_rho_prime},
                   {"K_tau_prime", c.K_tau_prime},
                   {"chi_l2_sq", c.chi_l2_sq},
                   {"chi_prime_l2_sq", c.chi_prime_l2_sq},
                   {"chi_prime_sup", c.chi_prime_sup},
                   {"kappa_l2_sq", c.kappa_l2_sq},
                   {"kappa_prime_l2_sq", c.kappa_prime_l2_sq},
                   {"kappa_sup", c.kappa_sup},
                   {"bound_terms", to_json(c.bound_terms)}};
  j["L_star"] = c.L_star ? nlohmann::json(*c.L_star) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const DirectRayleigh& d) {
  return {{"numeric_gap", d.numeric_gap}, {"error_estimate", d.error_estimate}, {"s_term", d.s_term},
          {"v_term", d.v_term},           {"ims_term", d.ims_term},             {"mass", d.mass},
          {"mass_expected", d.mass_expected}};
}

inline nlohmann::json to_json(const CertificateReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["alpha"] = r.alpha;
  j["a"] = r.a;
  j["shape_id"] = r.shape_id;
  j["parameters"] = to_json(r.parameters);
  j["constants"] = to_json(r.constants);
  j["criterion"] = {{"lhs", num(r.criterion.lhs)},
                    {"rhs", r.criterion.rhs},
                    {"holds", r.criterion.holds},
                    {"degenerate", r.criterion.degenerate}};
  j["analytic_gap"] = r.analytic_gap;
  j["numeric"] = r.numeric ? to_json(*r.numeric) : nlohmann::json(nullptr);
  j["verdict"] = to_string(r.verdict);
  j["binding_constraint"] = r.binding_constraint;
  j["geometry"] = {{"theta", r.geometry.theta},
                   {"min_J", r.geometry.min_J},
                   {"local_ok", r.geometry.local_ok},
                   {"globally_injective", r.geometry.globally_injective},
                   {"reason", r.geometry.reason}};
  j["lambda1"] = r.lambda1;
  j["lambda1_error"] = r.lambda1_error;
  j["gap_below_eigen_resolution"] = r.gap_below_eigen_resolution;
  j["rounds"] = r.rounds;
  nlohmann::json t = nlohmann::json::array();
  for (const auto& s : r.trace)
    t.push_back({{"rho", s.rho}, {"tau", s.tau}, {"L", s.L}, {"ims_rho", s.ims_rho}, {"ims_rho_share", s.ims_rho_share},
                 {"ims_tau", s.ims_tau}, {"ims_tau_share", s.ims_tau_share}});
  j["trace"] = t;
  j["notes"] = {{"mass_normalization", "||chi_L||^2 = L ||chi||^2"}, {"tau_prefactor", "c_alpha"}};
  return j;
}

}  // namespace trapcert
