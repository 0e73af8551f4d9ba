#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "trapcert/cross_section.hpp"
#include "trapcert/errors.hpp"
#include "trapcert/kernels.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

/** \brief Quadrature grid with the interval it covers. */
struct QuadGrid {
  std::vector<double> x, w;
  double lo = 0, hi = 0;
  bool folded = false;  // even integrands: nodes on (0,hi), weights count both signs

  std::size_t size() const { return x.size(); }
};

/**
 * Poisson convolution of g(t) (1-t^2)^e over t in (-1,1), scaled to
 * (-a,a): integral of P(n - a t, y) g(t) (1-t^2)^e a dt.
 * A Gauss-Jacobi rule is used when the kernel's complex poles are far from
 * the interval; otherwise panels are graded geometrically around the peak.
 */
class PoissonConvolution {
 public:
  /** poly_degree: degree of the smooth factor g when it is a polynomial (sets the fast-rule size). */
  PoissonConvolution(double alpha, double a, double edge_exponent, int poly_degree = 0, int panel_order = 0)
      : k_(alpha), a_(a), e_(edge_exponent), deg_(poly_degree),
        order_(panel_order > 0 ? panel_order : std::max(16, poly_degree / 2 + 6)) {
    for (int m : {32, 64, 128}) fast_.push_back(gauss_jacobi(m, e_, e_));
    gl_ = gauss_legendre(order_);
    left_ = gauss_jacobi(order_, 0.0, e_);
    right_ = gauss_jacobi(order_, e_, 0.0);
    both_ = gauss_jacobi(order_, e_, e_);
  }

  double alpha() const { return k_.alpha; }
  double half_width() const { return a_; }
  const std::vector<Rule>& fast_rules() const { return fast_; }
  int panel_order() const { return order_; }

  /** Extra grading centers (t, width) for non-polynomial g; disables the fast path. */
  void add_feature(double t, double width) { features_.push_back({t, width}); }

  /** Index of the fast rule that resolves (n,y), or -1. */
  int fast_index(double n, double y) const {
    if (!features_.empty()) return -1;
    const std::complex<double> z(n / a_, y / a_);
    std::complex<double> w = z + std::sqrt(z - 1.0) * std::sqrt(z + 1.0);
    double r = std::abs(w);
    if (r < 1.0) r = 1.0 / r;
    const double lr = std::log(r);
    if (!(lr > 0)) return -1;
    const double m = 0.5 * deg_ + 1.0 + 20.0 / lr;
    for (int i = 0; i < 3; ++i)
      if (m <= fast_[i].size()) return i;
    return -1;
  }

  /**
   * Accumulates the kernel (and optionally its gradient) against g.
   * gfast[i] holds g at the nodes of the fast rule i when available.
   */
  template <bool Grad, class G>
  KernelSample apply(double n, double y, G&& g, const std::vector<std::vector<double>>* gfast = nullptr) const {
    KernelSample acc{0, 0, 0};
    const int fi = fast_index(n, y);
    if (fi >= 0) {
      const Rule& r = fast_[fi];
      for (std::size_t i = 0; i < r.size(); ++i) {
        const double gv = gfast ? (*gfast)[fi][i] : g(r.x[i]);
        add<Grad>(acc, r.w[i] * gv, n - a_ * r.x[i], y);
      }
    } else {
      std::vector<double> br{-1.0, 1.0};
      grade(br, n / a_, y / a_);
      for (const auto& f : features_) grade(br, f.first, f.second);
      std::sort(br.begin(), br.end());
      br.erase(std::unique(br.begin(), br.end()), br.end());
      // gradients subtract u(n) on interior panels: the kernel derivative has zero
      // mass, and adding it back in closed form avoids cancellation at small y
      // nodes are offsets from tc so that n - a t keeps its relative accuracy when y is tiny
      const double tc = n / a_, r0 = std::fma(-a_, tc, n);
      const bool sub = Grad && tc > -1.0 && tc < 1.0;
      const double un = sub ? std::pow((1.0 - tc) * (1.0 + tc), e_) * g(tc) : 0.0;
      double ilo = 2.0, ihi = -2.0;
      for (std::size_t p = 0; p + 1 < br.size(); ++p) {
        const double lo = br[p], hi = br[p + 1], h = hi - lo;
        const bool L = lo == -1.0, R = hi == 1.0;
        const Rule& r = L && R ? both_ : (L ? left_ : (R ? right_ : gl_));
        const double scale = std::pow(0.5 * h, 1.0 + ((L || R) ? e_ : 0.0));
        const bool inner = !(L || R);
        if (inner) ilo = std::min(ilo, lo), ihi = std::max(ihi, hi);
        for (std::size_t i = 0; i < r.size(); ++i) {
          const double dt = (lo - tc) + 0.5 * h * (1.0 + r.x[i]), t = tc + dt, x = r0 - a_ * dt;
          double wt;
          if (L && R)
            wt = 1.0;
          else if (L)
            wt = std::pow(1.0 - t, e_);
          else if (R)
            wt = std::pow(1.0 + t, e_);
          else
            wt = std::pow((1.0 - t) * (1.0 + t), e_);
          const double u = wt * g(t);
          if (sub && inner) {
            const KernelSample k = k_.grad(x, y);
            const double w = scale * r.w[i];
            acc.value += w * u * k.value;
            acc.dx += w * (u - un) * k.dx;
            acc.dy += w * (u - un) * k.dy;
          } else {
            add<Grad>(acc, scale * r.w[i] * u, x, y);
          }
        }
      }
      if (sub && ilo < ihi) {
        const double s1 = (r0 - a_ * (ilo - tc)) / y, s2 = (r0 - a_ * (ihi - tc)) / y;
        const double f1 = density(s1), f2 = density(s2);
        acc.dx += un * (f1 - f2) / (y * a_);
        acc.dy += un * (s2 * f2 - s1 * f1) / (y * a_);
      }
    }
    acc.value *= a_;
    acc.dx *= a_;
    acc.dy *= a_;
    return acc;
  }

 private:
  // kernel profile: P(x,y) = density(x/y)/y
  double density(double s) const { return k_.C * std::pow(1.0 + s * s, -0.5 - k_.alpha); }

  template <bool Grad>
  void add(KernelSample& acc, double w, double x, double y) const {
    if constexpr (Grad) {
      const KernelSample s = k_.grad(x, y);
      acc.value += w * s.value;
      acc.dx += w * s.dx;
      acc.dy += w * s.dy;
    } else {
      acc.value += w * k_(x, y);
    }
  }

  // breakpoints graded (ratio 3) around the peak tc of width w, kept clear of tiny end panels
  static void grade(std::vector<double>& br, double tc, double w) {
    double c = std::clamp(tc, -1.0, 1.0);
    const double sigma = std::max(w, std::abs(tc - c));
    if (1.0 - c < 0.5 * sigma) c = 1.0;
    if (c + 1.0 < 0.5 * sigma) c = -1.0;
    if (c > -1.0 && c < 1.0) br.push_back(c);
    for (double d = sigma; d < 2.0; d *= 3.0) {
      if (c - d > -1.0 + 0.5 * d) br.push_back(c - d);
      if (c + d < 1.0 - 0.5 * d) br.push_back(c + d);
    }
  }

  PoissonKernel k_;
  double a_, e_;
  int deg_, order_;
  std::vector<Rule> fast_;
  Rule gl_, left_, right_, both_;
  std::vector<std::pair<double, double>> features_;
};

/**
 * \brief U1(n,y) and its gradient for a cross-section eigenpair, with a
 * memo of computed values (grids in parameter searches are nested).
 */
class ExtensionEvaluator {
 public:
  explicit ExtensionEvaluator(CrossSectionEigenpair pair)
      : pair_(std::move(pair)), conv_(pair_.alpha(), pair_.a, pair_.alpha(), pair_.resolution - 1) {
    for (const Rule& r : conv_.fast_rules()) {
      std::vector<double> v(r.size());
      for (std::size_t i = 0; i < r.size(); ++i) v[i] = pair_.poly(r.x[i]);
      gfast_.push_back(v);
    }
    // u1 = a^{-1/2} (1-t^2)^alpha p(t); the convolution supplies the factor a
    norm_ = 1.0 / std::sqrt(pair_.a);
  }

  const CrossSectionEigenpair& pair() const { return pair_; }
  double alpha() const { return pair_.alpha(); }
  int panel_order() const { return conv_.panel_order(); }

  double value(double n, double y) const {
    n = std::abs(n);
    const Key key{n, y};
    {
      std::lock_guard<std::mutex> lock(m_);
      auto it = memo_.find(key);
      if (it != memo_.end()) return it->second;
    }
    const double v = norm_ * conv_.apply<false>(n, y, [&](double t) { return pair_.poly(t); }, &gfast_).value;
    std::lock_guard<std::mutex> lock(m_);
    memo_.emplace(key, v);
    return v;
  }

  /** U1, dU1/dn, dU1/dy. */
  KernelSample gradient(double n, double y) const {
    KernelSample s = conv_.apply<true>(n, y, [&](double t) { return pair_.poly(t); }, &gfast_);
    s.value *= norm_;
    s.dx *= norm_;
    s.dy *= norm_;
    return s;
  }

  std::size_t memo_size() const {
    std::lock_guard<std::mutex> lock(m_);
    return memo_.size();
  }

 private:
  struct Key {
    double n, y;
    bool operator==(const Key& o) const { return n == o.n && y == o.y; }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t a, b;
      std::memcpy(&a, &k.n, 8);
      std::memcpy(&b, &k.y, 8);
      return std::hash<std::uint64_t>()(a * 0x9E3779B97F4A7C15ULL ^ b);
    }
  };

  CrossSectionEigenpair pair_;
  PoissonConvolution conv_;
  std::vector<std::vector<double>> gfast_;
  double norm_;
  mutable std::mutex m_;
  mutable std::unordered_map<Key, double, KeyHash> memo_;
};

// --------------------------------------------------------------- grids

inline constexpr int kFieldPanelOrder = 10;

namespace detail {

inline QuadGrid grid_from_breaks(std::vector<double> br, int order, double lo, double hi) {
  std::sort(br.begin(), br.end());
  br.erase(std::unique(br.begin(), br.end()), br.end());
  Rule r = composite_rule(br, order);
  QuadGrid g;
  g.x = r.x;
  g.w = r.w;
  g.lo = lo;
  g.hi = hi;
  return g;
}

// graded toward a from both sides, geometric up to rho/2, uniform transition [rho/2, rho]
inline std::vector<double> n_breaks(double a, double rho, int grade = 15) {
  std::vector<double> br{0.0, a};
  for (int k = 1; k <= grade; ++k) {
    br.push_back(a * (1.0 - std::ldexp(1.0, -2 * k)));
    const double r = a * (1.0 + std::ldexp(1.0, -2 * k));
    if (r < rho) br.push_back(r);
  }
  for (double x = 2.0 * a; x < 0.5 * rho; x *= 2.0) br.push_back(x);
  for (int i = 0; i <= 8; ++i) br.push_back(0.5 * rho * (1.0 + i / 8.0));
  std::vector<double> out;
  for (double b : br)
    if (b >= 0 && b <= rho) out.push_back(b);
  return out;
}

}  // namespace detail

/** Folded n-grid on (-rho, rho) for even integrands. */
inline QuadGrid make_n_grid(double a, double rho, int order = kFieldPanelOrder) {
  if (!(rho > a)) throw InputError("n-grid: rho must exceed a");
  QuadGrid g = detail::grid_from_breaks(detail::n_breaks(a, rho), order, -rho, rho);
  for (double& w : g.w) w *= 2.0;
  g.folded = true;
  return g;
}

/** Smallest y node scale: the first panel is (0, y0] with the weighted rule. */
inline double field_y0(double a) { return std::ldexp(a, -30); }

inline constexpr double kFieldYRatio = 4.0;

/**
 * y-grid with weights including y^{1-2 alpha}: weighted Gauss rule on (0,y0],
 * geometric panels (ratio 4) above, and a uniform transition on [tau/2, tau]
 * when tau is given. Without tau the grid ends at y_max.
 */
inline QuadGrid make_y_grid(double alpha, double a, double y_end, bool tau_cutoff, int order = kFieldPanelOrder) {
  const double y0 = field_y0(a);
  if (!(y_end > 4.0 * y0)) throw InputError("y-grid: upper end too small");
  const WeightedQuadrature first = make_weighted_rule(alpha, y0, 2 * order - 1);
  std::vector<double> br;
  const double top = tau_cutoff ? 0.5 * y_end : y_end;
  for (double y = y0; y < top; y *= kFieldYRatio) br.push_back(y);
  br.push_back(top);
  if (tau_cutoff)
    for (int i = 1; i <= 8; ++i) br.push_back(0.5 * y_end * (1.0 + i / 8.0));
  QuadGrid g = detail::grid_from_breaks(br, order, 0.0, y_end);
  const double e = 1.0 - 2.0 * alpha;
  for (std::size_t i = 0; i < g.size(); ++i) g.w[i] *= std::pow(g.x[i], e);
  g.x.insert(g.x.begin(), first.rule.x.begin(), first.rule.x.end());
  g.w.insert(g.w.begin(), first.rule.w.begin(), first.rule.w.end());
  return g;
}

/** \brief Samples of U1 on a tensor grid. */
struct ExtensionField {
  std::shared_ptr<const ExtensionEvaluator> eval;
  QuadGrid n_grid, y_grid;
  Eigen::MatrixXd U;  // rows: n nodes, columns: y nodes
  int convolution_order = 0;
  double y_tail_bound = 0.0;  // bound on the y > y_max part of the K integrand (no tau cutoff)

  const CrossSectionEigenpair& pair() const { return eval->pair(); }
  double alpha() const { return eval->alpha(); }
};

/**
 * Analytic bound for the part of int_{|n|<rho} int_{y>Y} y^{1-2a} U1^2 beyond Y:
 * U1 <= C_P ||u1||_1 / y.
 */
inline double extension_tail_bound(const CrossSectionEigenpair& p, double rho, double Y) {
  const double m = poisson_constant(p.alpha()) * p.integral_abs();
  return 2.0 * rho * m * m * std::pow(Y, -2.0 * p.alpha()) / (2.0 * p.alpha());
}

inline ExtensionField extend(std::shared_ptr<const ExtensionEvaluator> eval, QuadGrid grid_n, QuadGrid grid_y) {
  if (grid_n.size() == 0 || grid_y.size() == 0) throw InputError("extend: empty grid");
  for (double y : grid_y.x)
    if (!(y > 0.0)) throw InputError("extend: y nodes must be positive");
  ExtensionField f;
  f.eval = std::move(eval);
  f.n_grid = std::move(grid_n);
  f.y_grid = std::move(grid_y);
  f.convolution_order = f.eval->panel_order();
  f.U.resize(f.n_grid.size(), f.y_grid.size());
  for (std::size_t i = 0; i < f.n_grid.size(); ++i)
    for (std::size_t j = 0; j < f.y_grid.size(); ++j) {
      const double v = f.eval->value(f.n_grid.x[i], f.y_grid.x[j]);
      if (!std::isfinite(v)) throw NumericalError("extension value not finite");
      f.U(i, j) = v;
    }
  const double rho = f.n_grid.hi;
  f.y_tail_bound = extension_tail_bound(f.pair(), rho, f.y_grid.hi);
  return f;
}

inline ExtensionField extend(const CrossSectionEigenpair& pair, QuadGrid grid_n, QuadGrid grid_y) {
  return extend(std::make_shared<const ExtensionEvaluator>(pair), std::move(grid_n), std::move(grid_y));
}

/** Default y extent without a tau cutoff. */
inline double infinity_surrogate(double a, double rho) { return 1e4 * std::max(rho, a); }

/**
 * Field for (rho, tau): n over (-rho, rho), y over (0, tau) or the
 * infinity surrogate when tau is absent.
 */
inline ExtensionField make_field(std::shared_ptr<const ExtensionEvaluator> eval, double rho,
                                 std::optional<double> tau = std::nullopt) {
  const auto& p = eval->pair();
  const double y_end = tau ? *tau : infinity_surrogate(p.a, rho);
  return extend(eval, make_n_grid(p.a, rho), make_y_grid(p.alpha(), p.a, y_end, tau.has_value()));
}

struct FieldInvariants {
  double max_value = 0;
  double min_value = 0;
  double trace_error = 0;  // max |U1(n, y_min) - u1(n)| over interior n, |n| <= (1 - 1e-3) a
  double trace_tol = 0;    // leading term lambda1 sup u1 y_min^{2a} / (2a c_a), doubled
  bool ok = true;
};

inline FieldInvariants check_field(const ExtensionField& f) {
  FieldInvariants r;
  r.max_value = f.U.maxCoeff();
  r.min_value = f.U.minCoeff();
  const auto& p = f.pair();
  for (std::size_t i = 0; i < f.n_grid.size(); ++i) {
    const double n = f.n_grid.x[i];
    // outside the interval U1 ~ y^{2a} d^{-2a}, not covered by the tolerance below
    if (std::abs(n) > (1 - 1e-3) * p.a) continue;
    r.trace_error = std::max(r.trace_error, std::abs(f.U(i, 0) - p(n)));
  }
  double sup_u = 0;
  for (int i = 0; i <= 2000; ++i) sup_u = std::max(sup_u, p(-p.a + 2 * p.a * i / 2000.0));
  const double al = p.alpha();
  r.trace_tol = 2.0 * p.lambda1 * sup_u * std::pow(f.y_grid.x.front(), 2 * al) / (2 * al * c_alpha(al)) + 1e-10;
  r.ok = r.min_value > 0.0 && r.max_value <= sup_u * (1 + 1e-9) && r.trace_error <= r.trace_tol;
  return r;
}

// ---------------------------------------------------------- K-integrals

struct KIntegrals {
  double K = 0;
  double K_rho_prime = 0;
  double K_tau_prime = 0;
  bool has_tau = false;
  double rho = 0, tau = 0;
  std::string cutoff_id;
  double tail_bound = 0;  // y-truncation bound (no tau cutoff)
};

/**
 * K = int int y^{1-2a} chi_rho^2 [chi_tau^2] U1^2,
 * K'_rho with |chi_rho'|^2, K'_tau with |chi_tau'|^2.
 */
inline KIntegrals k_integrals(const ExtensionField& f, const CutoffProfile& chi, double rho,
                              std::optional<double> tau) {
  const auto& p = f.pair();
  const FractionalOrder order(p.alpha());
  if (order.regime != Regime::high && !tau)
    throw ConfigurationError("tau cutoff required for alpha <= 1/2 (the tau-free integrals diverge)");
  if (!(rho >= 2.0 * p.a * (1 - 1e-12))) throw PreconditionError("k_integrals: rho must be at least 2a", rho);
  if (f.n_grid.hi < rho * (1 - 1e-12) || (f.n_grid.hi > rho * (1 + 1e-12)))
    throw ConfigurationError("k_integrals: field n-grid does not match rho");
  if (tau && std::abs(f.y_grid.hi - *tau) > 1e-12 * *tau)
    throw ConfigurationError("k_integrals: field y-grid does not match tau");
  KIntegrals k;
  k.rho = rho;
  k.has_tau = tau.has_value();
  k.tau = tau.value_or(0.0);
  k.cutoff_id = chi.id();
  const ScaledCutoff cr = cutoff_rescale(chi, rho);
  std::vector<double> ct(f.y_grid.size(), 1.0), dct(f.y_grid.size(), 0.0);
  if (tau) {
    const ScaledCutoff c = cutoff_rescale(chi, *tau);
    for (std::size_t j = 0; j < f.y_grid.size(); ++j) {
      ct[j] = c(f.y_grid.x[j]);
      dct[j] = c.deriv(f.y_grid.x[j]);
    }
  }
  for (std::size_t i = 0; i < f.n_grid.size(); ++i) {
    const double n = f.n_grid.x[i];
    const double c = cr(n), dc = cr.deriv(n);
    double g = 0, gp = 0;
    for (std::size_t j = 0; j < f.y_grid.size(); ++j) {
      const double u2 = f.y_grid.w[j] * f.U(i, j) * f.U(i, j);
      g += ct[j] * ct[j] * u2;
      gp += dct[j] * dct[j] * u2;
    }
    k.K += f.n_grid.w[i] * c * c * g;
    k.K_rho_prime += f.n_grid.w[i] * dc * dc * g;
    k.K_tau_prime += f.n_grid.w[i] * c * c * gp;
  }
  if (!tau) k.tail_bound = f.y_tail_bound;
  if (!(k.K > 0) || !std::isfinite(k.K + k.K_rho_prime + k.K_tau_prime))
    throw InvariantViolation("K-integrals not finite and positive");
  return k;
}

/** y-profile G(n) = int y^{1-2a} chi_tau^2 U1^2 dy at the field's n nodes (no chi_rho). */
inline std::vector<double> y_profile(const ExtensionField& f, const CutoffProfile& chi, std::optional<double> tau) {
  std::vector<double> G(f.n_grid.size(), 0.0);
  std::vector<double> ct(f.y_grid.size(), 1.0);
  if (tau) {
    const ScaledCutoff c = cutoff_rescale(chi, *tau);
    for (std::size_t j = 0; j < f.y_grid.size(); ++j) ct[j] = c(f.y_grid.x[j]);
  }
  for (std::size_t i = 0; i < f.n_grid.size(); ++i)
    for (std::size_t j = 0; j < f.y_grid.size(); ++j) G[i] += f.y_grid.w[j] * ct[j] * ct[j] * f.U(i, j) * f.U(i, j);
  return G;
}

// ------------------------------------------------------- Fourier route

namespace detail {

// xi breakpoints on [0, xmax]: uniform panels of the given width, the first one
// graded toward 0 (phi(z) - 1 ~ z^{2 alpha} is not smooth there)
inline std::vector<double> xi_breaks(double width, double xmax) {
  std::vector<double> br{0.0};
  for (int k = 40; k >= 1; --k) br.push_back(std::ldexp(width, -k));
  for (double x = width; x < xmax; x += width) br.push_back(x);
  br.push_back(xmax);
  return br;
}

}  // namespace detail

/**
 * U1(n,y) by damping the transform of u1: (2/sqrt(2 pi)) int_0^inf cos(xi n) phi(y xi) Fu1(xi) dxi.
 * Intended for y >= 0.05 a.
 */
inline double extension_fourier(const CrossSectionEigenpair& p, double n, double y) {
  const double xmax = 40.0 / y;
  const Rule r = composite_rule(detail::xi_breaks(std::numbers::pi / (4.0 * (p.a + std::abs(n))), xmax), 12);
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    s += r.w[i] * std::cos(r.x[i] * n) * fourier_damping(p.alpha(), y * r.x[i]) * p.fourier(r.x[i]);
  return 2.0 * s / std::sqrt(2.0 * std::numbers::pi);
}

/** ||U1(., y)||^2 over the whole line, by Parseval: 2 int_0^inf phi(y xi)^2 |Fu1|^2. Intended for y >= 0.05 a. */
inline double extension_norm_sq(const CrossSectionEigenpair& p, double y) {
  const double xmax = 40.0 / y;
  const Rule r = composite_rule(detail::xi_breaks(std::min(std::numbers::pi / (4.0 * p.a), xmax / 8.0), xmax), 12);
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = fourier_damping(p.alpha(), y * r.x[i]), fu = p.fourier(r.x[i]);
    s += r.w[i] * d * d * fu * fu;
  }
  return 2.0 * s;
}

// ---------------------------------------------------- decay diagnostics

struct DecayDiagnostics {
  std::vector<double> y, norm_sq;  // ||U1(.,y)||^2 samples
  double slope = 0;                // log-log slope over the largest decade
  double slope_y_lo = 0, slope_y_hi = 0;
  // alpha = 1/2: cumulative int_0^tau ||U1(.,y)||^2 dy against c1 + c2 log tau
  std::vector<double> tau, cumulative;
  double log_fit_c1 = 0, log_fit_c2 = 0, log_fit_r2 = 0;
  // alpha > 1/2: partial integrals of y^{1-2a} ||U1||^2 over (y_lo, 10^k y_lo)
  std::vector<double> partial_limits, partial_integrals;
};

namespace detail {

inline void linear_fit(const std::vector<double>& x, const std::vector<double>& y, double& c0, double& c1, double& r2) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i] / n, my += y[i] / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  c1 = sxy / sxx;
  c0 = my - c1 * mx;
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += std::pow(y[i] - c0 - c1 * x[i], 2);
  r2 = syy > 0 ? 1.0 - ss / syy : 1.0;
}

// int_lo^hi y^{1-2a} ||U1(.,y)||^2 dy on geometric panels
inline double weighted_norm_integral(const CrossSectionEigenpair& p, double lo, double hi) {
  const Rule& gl = gauss_legendre(8);
  double s = 0;
  for (double b = lo; b < hi * (1 - 1e-12);) {
    const double e = std::min(hi, b * 1.5);
    for (std::size_t i = 0; i < gl.size(); ++i) {
      const double y = 0.5 * (b + e) + 0.5 * (e - b) * gl.x[i];
      s += 0.5 * (e - b) * gl.w[i] * std::pow(y, 1 - 2 * p.alpha()) * extension_norm_sq(p, y);
    }
    b = e;
  }
  return s;
}

}  // namespace detail

/**
 * Decay of ||U1(.,y)||_{L2(R)}^2 over the field's y-range (computed on the
 * Fourier side for y >= a/10), plus the regime-specific growth or tail checks.
 */
inline DecayDiagnostics decay_diagnostics(const ExtensionField& f) {
  const auto& p = f.pair();
  const double y_lo = std::max(0.1 * p.a, f.y_grid.x.front());
  const double y_hi = f.y_grid.hi;
  if (!(y_hi >= 100.0 * y_lo)) throw CapabilityError("decay diagnostics need a y-range of at least two decades", y_hi / y_lo);
  DecayDiagnostics d;
  const int per_decade = 8;
  const int count = static_cast<int>(std::floor(std::log10(y_hi / y_lo) * per_decade));
  for (int i = 0; i <= count; ++i) {
    const double y = y_hi * std::pow(10.0, -static_cast<double>(count - i) / per_decade);
    d.y.push_back(y);
    d.norm_sq.push_back(extension_norm_sq(p, y));
  }
  {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < d.y.size(); ++i)
      if (d.y[i] >= y_hi / 10.0 * (1 - 1e-12)) {
        lx.push_back(std::log(d.y[i]));
        ly.push_back(std::log(d.norm_sq[i]));
      }
    double c0, r2;
    detail::linear_fit(lx, ly, c0, d.slope, r2);
    d.slope_y_lo = y_hi / 10.0;
    d.slope_y_hi = y_hi;
  }
  const FractionalOrder order(p.alpha());
  if (order.regime == Regime::half) {
    // int_0^{Y0} via Fubini with phi^2 = exp(-2z): 2 int |Fu1|^2 (1 - e^{-2 Y0 xi}) / (2 xi)
    const double Y0 = 0.1 * p.a;
    const double xmax = 400.0 / p.a;
    const double width = std::numbers::pi / (4.0 * p.a);
    const Rule& gl = gauss_legendre(12);
    double T0 = 0;
    for (double lo = 0; lo < xmax; lo += width)
      for (std::size_t i = 0; i < gl.size(); ++i) {
        const double xi = lo + 0.5 * width * (1 + gl.x[i]);
        const double fu = p.fourier(xi);
        T0 += 0.5 * width * gl.w[i] * fu * fu * -std::expm1(-2 * Y0 * xi) / xi;
      }
    double acc = T0, prev = Y0;
    const double t_lo = 10.0, t_hi = std::min(1000.0, y_hi);
    for (int i = 0; i <= 20; ++i) {
      const double t = t_lo * std::pow(t_hi / t_lo, i / 20.0);
      acc += detail::weighted_norm_integral(p, prev, t);
      prev = t;
      d.tau.push_back(t);
      d.cumulative.push_back(acc);
    }
    std::vector<double> lx;
    for (double t : d.tau) lx.push_back(std::log(t));
    detail::linear_fit(lx, d.cumulative, d.log_fit_c1, d.log_fit_c2, d.log_fit_r2);
  } else if (order.regime == Regime::high) {
    double acc = 0, prev = y_lo;
    for (double lim = 10 * y_lo; lim <= y_hi * (1 + 1e-12); lim *= 10) {
      acc += detail::weighted_norm_integral(p, prev, lim);
      prev = lim;
      d.partial_limits.push_back(lim);
      d.partial_integrals.push_back(acc);
    }
  }
  return d;
}

/** Weighted Dirichlet energy sum w |grad U1|^2 over a tensor grid (y weights carry y^{1-2a}). */
inline double weighted_energy(const ExtensionEvaluator& ev, const QuadGrid& gn, const QuadGrid& gy) {
  double e = 0;
  for (std::size_t i = 0; i < gn.size(); ++i)
    for (std::size_t j = 0; j < gy.size(); ++j) {
      const KernelSample g = ev.gradient(gn.x[i], gy.x[j]);
      e += gn.w[i] * gy.w[j] * (g.dx * g.dx + g.dy * g.dy);
    }
  return e;
}

// ------------------------------------------------------------- export

/** Plot table rows: n, y, U1, weight (weights include y^{1-2a} and the fold). */
inline std::string field_table_csv(const ExtensionField& f, std::size_t stride = 1) {
  std::string out = "n,y,U1,weight\n";
  char buf[160];
  for (std::size_t i = 0; i < f.n_grid.size(); i += stride)
    for (std::size_t j = 0; j < f.y_grid.size(); j += stride) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", f.n_grid.x[i], f.y_grid.x[j], f.U(i, j),
                    f.n_grid.w[i] * f.y_grid.w[j]);
      out += buf;
    }
  return out;
}

}  // namespace trapcert
