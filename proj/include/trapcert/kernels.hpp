#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/tools/minima.hpp>

#include "trapcert/errors.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

enum class Regime { low, half, high };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::low: return "low";
    case Regime::half: return "half";
    case Regime::high: return "high";
  }
  return "?";
}

inline void check_alpha(double alpha, const char* who) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw DomainError(std::string(who) + ": alpha must lie in (0,1)", alpha);
}

/** c_alpha = 4^a Gamma(a+1) / (2a Gamma(1-a)). */
inline double c_alpha(double alpha) {
  check_alpha(alpha, "c_alpha");
  return std::pow(4.0, alpha) * std::tgamma(alpha + 1.0) / (2.0 * alpha * std::tgamma(1.0 - alpha));
}

/** \brief Fractional order with its constant and regime. */
struct FractionalOrder {
  double alpha = 0.5;
  double c = 1.0;
  Regime regime = Regime::half;

  FractionalOrder() = default;
  explicit FractionalOrder(double a) : alpha(a), c(c_alpha(a)) {
    regime = a < 0.5 ? Regime::low : (a == 0.5 ? Regime::half : Regime::high);
  }
  // exponent of the weight y^{1-2a}
  double weight_exponent() const { return 1.0 - 2.0 * alpha; }
};

/** Normalizing constant of the 1D Poisson kernel. */
inline double poisson_constant(double alpha) {
  return std::tgamma(0.5 + alpha) / (std::sqrt(std::numbers::pi) * std::tgamma(alpha));
}

inline double poisson_kernel(double alpha, double x, double y) {
  check_alpha(alpha, "poisson_kernel");
  if (!(y > 0.0)) throw DomainError("poisson_kernel: y must be positive", y);
  return poisson_constant(alpha) * std::pow(y, 2.0 * alpha) * std::pow(x * x + y * y, -0.5 - alpha);
}

struct KernelSample {
  double value;
  double dx;
  double dy;
};

/**
 * Kernel and its gradient with a precomputed constant; no argument checks,
 * used inside convolution loops.
 */
struct PoissonKernel {
  double alpha;
  double C;

  explicit PoissonKernel(double a) : alpha(a), C(poisson_constant(a)) { check_alpha(a, "PoissonKernel"); }

  double operator()(double x, double y) const {
    return C * std::pow(y, 2.0 * alpha) * std::pow(x * x + y * y, -0.5 - alpha);
  }

  KernelSample grad(double x, double y) const {
    const double r2 = x * x + y * y;
    const double p = C * std::pow(y, 2.0 * alpha) * std::pow(r2, -0.5 - alpha);
    return {p, -p * (1.0 + 2.0 * alpha) * x / r2, p * (2.0 * alpha / y - (1.0 + 2.0 * alpha) * y / r2)};
  }
};

/**
 * Damping factor of the extension in Fourier space:
 * phi(z) = 2^{1-a}/Gamma(a) z^a K_a(z), phi(0) = 1.
 */
inline double fourier_damping(double alpha, double z) {
  if (z <= 0.0) return 1.0;
  if (z > 700.0) return 0.0;
  return std::pow(2.0, 1.0 - alpha) / std::tgamma(alpha) * std::pow(z, alpha) * std::cyl_bessel_k(alpha, z);
}

// ---------------------------------------------------------------- cutoffs

/**
 * \brief Even plateau cutoff: chi = 1 on [-1/2,1/2], supp in (-1,1).
 * Norms are computed once at construction.
 */
class CutoffProfile {
 public:
  using Fn = std::function<double(double)>;

  CutoffProfile(std::string id, Fn chi, Fn dchi) : id_(std::move(id)), chi_(std::move(chi)), dchi_(std::move(dchi)) {
    // transition lives on (1/2,1)
    l2_ = 2.0 * (0.5 + integrate_adaptive([&](double t) { return chi_(t) * chi_(t); }, 0.5, 1.0));
    l2d_ = 2.0 * integrate_adaptive([&](double t) { return dchi_(t) * dchi_(t); }, 0.5, 1.0);
    int best = 0;
    double s = 0.0;
    for (int i = 0; i <= 2000; ++i) {
      const double v = std::abs(dchi_(0.5 + 0.5 * i / 2000.0));
      if (v > s) s = v, best = i;
    }
    const double t0 = 0.5 + 0.5 * best / 2000.0;
    auto neg = [&](double t) { return -std::abs(dchi_(t)); };
    auto r = boost::math::tools::brent_find_minima(neg, std::max(0.5, t0 - 5e-4), std::min(1.0, t0 + 5e-4), 50);
    sup_ = std::max(s, -r.second);
    verify();
  }

  const std::string& id() const { return id_; }
  double operator()(double t) const { return chi_(t); }
  double deriv(double t) const { return dchi_(t); }
  double norm_l2_sq() const { return l2_; }
  double norm_l2_sq_deriv() const { return l2d_; }
  double sup_deriv() const { return sup_; }

  /** Pointwise re-check of evenness, plateau, support and range. */
  void verify() const {
    for (int i = 0; i <= 4000; ++i) {
      const double t = -1.2 + 2.4 * i / 4000.0;
      const double v = chi_(t);
      if (std::abs(v - chi_(-t)) > 1e-12) throw InvariantViolation("cutoff " + id_ + " is not even");
      if (v < 0.0 || v > 1.0) throw InvariantViolation("cutoff " + id_ + " leaves [0,1]");
      if (std::abs(t) <= 0.5 && v != 1.0) throw InvariantViolation("cutoff " + id_ + " plateau broken");
      if (std::abs(t) >= 1.0 && v != 0.0) throw InvariantViolation("cutoff " + id_ + " support broken");
    }
    if (!(l2_ > 0 && l2d_ > 0 && sup_ > 0) || !std::isfinite(l2_ + l2d_ + sup_))
      throw InvariantViolation("cutoff " + id_ + " norms not positive and finite");
  }

  static CutoffProfile smooth_step() { return from_psi("smooth_step", 1); }
  // same support, flatter transition
  static CutoffProfile smooth_step_sq() { return from_psi("smooth_step_sq", 2); }

  static CutoffProfile by_id(const std::string& id) {
    if (id == "smooth_step") return smooth_step();
    if (id == "smooth_step_sq") return smooth_step_sq();
    throw InputError("unknown cutoff id '" + id + "'");
  }

 private:
  // step(x) = psi(x)/(psi(x)+psi(1-x)), psi(x) = exp(-1/x^p), chi(t) = step(2(1-|t|))
  static CutoffProfile from_psi(const std::string& id, int p) {
    auto psi = [p](double x) { return x <= 0.0 ? 0.0 : std::exp(-std::pow(x, -p)); };
    auto dpsi = [p](double x) { return x <= 0.0 ? 0.0 : p * std::pow(x, -p - 1) * std::exp(-std::pow(x, -p)); };
    auto step = [psi](double x) {
      if (x <= 0.0) return 0.0;
      if (x >= 1.0) return 1.0;
      const double a = psi(x), b = psi(1.0 - x);
      return a / (a + b);
    };
    auto dstep = [psi, dpsi](double x) {
      if (x <= 0.0 || x >= 1.0) return 0.0;
      const double a = psi(x), b = psi(1.0 - x), s = a + b;
      return (dpsi(x) * b + a * dpsi(1.0 - x)) / (s * s);
    };
    Fn chi = [step](double t) { return step(2.0 * (1.0 - std::abs(t))); };
    Fn dchi = [dstep](double t) {
      const double d = -2.0 * dstep(2.0 * (1.0 - std::abs(t)));
      return t < 0 ? -d : d;
    };
    return CutoffProfile(id, chi, dchi);
  }

  std::string id_;
  Fn chi_, dchi_;
  double l2_ = 0, l2d_ = 0, sup_ = 0;
};

/** \brief The three norms of a cutoff and their closed-form rescaling. */
struct CutoffNorms {
  double l2_sq;
  double l2_sq_deriv;
  double sup_deriv;

  CutoffNorms rescaled(double scale) const {
    if (!(scale > 0.0)) throw DomainError("cutoff_rescale: scale must be positive", scale);
    return {scale * l2_sq, l2_sq_deriv / scale, sup_deriv / scale};
  }
};

/** \brief chi(t/scale). */
struct ScaledCutoff {
  const CutoffProfile* base;
  double scale;
  CutoffNorms norms;

  double operator()(double t) const { return (*base)(t / scale); }
  double deriv(double t) const { return base->deriv(t / scale) / scale; }
};

inline CutoffNorms norms_of(const CutoffProfile& p) {
  return {p.norm_l2_sq(), p.norm_l2_sq_deriv(), p.sup_deriv()};
}

inline ScaledCutoff cutoff_rescale(const CutoffProfile& profile, double scale) {
  return ScaledCutoff{&profile, scale, norms_of(profile).rescaled(scale)};
}

// ------------------------------------------------------- weighted rules

/** \brief Gauss rule for y^{1-2a} dy on (0, y_max). */
struct WeightedQuadrature {
  double exponent = 0.0;
  double y_max = 1.0;
  int degree = 1;
  Rule rule;
};

inline int max_weighted_degree() { return 2 * kMaxGaussNodes - 1; }

inline WeightedQuadrature make_weighted_rule(double alpha, double y_max, int degree) {
  check_alpha(alpha, "make_weighted_rule");
  if (!(y_max > 0.0)) throw DomainError("make_weighted_rule: y_max must be positive", y_max);
  if (degree < 1) throw InputError("make_weighted_rule: degree must be >= 1");
  if (degree > max_weighted_degree())
    throw CapabilityError("make_weighted_rule: maximum supported degree is " + std::to_string(max_weighted_degree()),
                          max_weighted_degree());
  const int n = (degree + 2) / 2;
  const double e = 1.0 - 2.0 * alpha;
  // y = y_max (1+x)/2, so y^e dy = (y_max/2)^{e+1} (1+x)^e dx
  Rule ref = gauss_jacobi(n, 0.0, e);
  WeightedQuadrature q;
  q.exponent = e;
  q.y_max = y_max;
  q.degree = 2 * n - 1;
  const double f = std::pow(0.5 * y_max, e + 1.0);
  for (int i = 0; i < n; ++i) {
    q.rule.x.push_back(0.5 * y_max * (1.0 + ref.x[i]));
    q.rule.w.push_back(f * ref.w[i]);
  }
  return q;
}

}  // namespace trapcert
