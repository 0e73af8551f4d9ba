#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

#include "trapcert/errors.hpp"
#include "trapcert/kernels.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

/**
 * \brief Unit curvature shape on [-1,1] with sup |k| = 1; the certificate
 * scales it to eps * k(s/ell).
 */
struct ProfileShape {
  std::string id;
  std::function<double(double)> k, dk;
  double c_kappa = 0;        // int k^2
  double c_kappa_prime = 0;  // int k'^2

  ProfileShape(std::string name, std::function<double(double)> f, std::function<double(double)> df)
      : id(std::move(name)), k(std::move(f)), dk(std::move(df)) {
    std::vector<double> br;
    for (int i = 0; i <= 400; ++i) br.push_back(-1.0 + 2.0 * i / 400);
    const Rule q = composite_rule(br, 20);
    c_kappa = q.apply([&](double r) { return k(r) * k(r); });
    c_kappa_prime = q.apply([&](double r) { return dk(r) * dk(r); });
  }

  /** Smallest admissible ell/rho at amplitude theta = rho*eps. */
  double ell_over_rho_threshold(double theta) const {
    return std::sqrt(2.0 * (1 + theta) * (1 + theta) / std::pow(1 - theta, 4) * c_kappa_prime / c_kappa);
  }
};

namespace shapes {

inline double mollifier(double r) { return std::abs(r) >= 1.0 ? 0.0 : std::exp(1.0 - 1.0 / (1.0 - r * r)); }
inline double mollifier_prime(double r) {
  if (std::abs(r) >= 1.0) return 0.0;
  const double q = 1.0 - r * r;
  return mollifier(r) * (-2.0 * r / (q * q));
}

inline ProfileShape smooth_bump() { return {"smooth_bump", mollifier, mollifier_prime}; }

inline ProfileShape plateau_bump() {
  auto chi = std::make_shared<CutoffProfile>(CutoffProfile::smooth_step());
  return {"plateau_bump", [chi](double r) { return (*chi)(r); }, [chi](double r) { return chi->deriv(r); }};
}

// (1-r^2)^2: C^1 across r = +-1
inline ProfileShape poly_c1() {
  return {"poly_c1", [](double r) { return std::abs(r) >= 1 ? 0.0 : (1 - r * r) * (1 - r * r); },
          [](double r) { return std::abs(r) >= 1 ? 0.0 : -4.0 * r * (1 - r * r); }};
}

inline ProfileShape oscillating(double omega = 40.0) {
  return {"oscillating", [omega](double r) { return mollifier(r) * std::cos(omega * r); },
          [omega](double r) {
            return mollifier_prime(r) * std::cos(omega * r) - omega * mollifier(r) * std::sin(omega * r);
          }};
}

inline ProfileShape by_id(const std::string& id, double omega = 40.0) {
  if (id == "smooth_bump") return smooth_bump();
  if (id == "plateau_bump") return plateau_bump();
  if (id == "poly_c1") return poly_c1();
  if (id == "oscillating") return oscillating(omega);
  throw InputError("unknown profile shape '" + id + "'");
}

}  // namespace shapes

/** \brief Curvature kappa(s) supported in [-ell, ell] with its norms. */
class CurvatureProfile {
 public:
  using Fn = std::function<double(double)>;

  CurvatureProfile(std::string id, Fn kappa, Fn kappa_prime, double ell, double sup_hint = -1.0)
      : id_(std::move(id)), k_(std::move(kappa)), dk_(std::move(kappa_prime)), ell_(ell) {
    if (!(ell > 0.0)) throw InputError("curvature support radius must be positive");
    const int panels = 800;
    std::vector<double> br;
    for (int i = 0; i <= panels; ++i) br.push_back(-ell + 2.0 * ell * i / panels);
    const Rule q = composite_rule(br, 16);
    l2k_ = q.apply([&](double s) { return k_(s) * k_(s); });
    l2dk_ = q.apply([&](double s) { return dk_(s) * dk_(s); });
    if (!std::isfinite(l2k_) || !std::isfinite(l2dk_)) throw InputError("curvature profile has non-finite values");
    if (sup_hint >= 0.0) {
      sup_ = sup_hint;
    } else {
      double m = 0.0;
      for (int i = 0; i <= 20000; ++i) m = std::max(m, std::abs(k_(-ell + 2.0 * ell * i / 20000)));
      sup_ = m;
    }
  }

  /** The straight guide. */
  static CurvatureProfile zero(double ell = 1.0) {
    return CurvatureProfile("zero", [](double) { return 0.0; }, [](double) { return 0.0; }, ell, 0.0);
  }

  /** kappa = c on [-ell, ell] (a circular arc between straight tails). */
  static CurvatureProfile constant(double c, double ell) {
    return CurvatureProfile(
        "constant", [c, ell](double s) { return std::abs(s) <= ell ? c : 0.0; }, [](double) { return 0.0; }, ell,
        std::abs(c));
  }

  /** eps * k(s/ell). */
  static CurvatureProfile scaled(const ProfileShape& shape, double eps, double ell) {
    if (!(ell > 0.0)) throw InputError("scaled profile: ell must be positive");
    auto k = shape.k;
    auto dk = shape.dk;
    // sup of every built-in shape is 1, attained at 0
    return CurvatureProfile(
        shape.id, [k, eps, ell](double s) { return eps * k(s / ell); },
        [dk, eps, ell](double s) { return eps / ell * dk(s / ell); }, ell, std::abs(eps) * std::abs(shape.k(0.0)));
  }

  /**
   * Uniformly sampled table; kappa and kappa' come from the trigonometric
   * interpolant of the samples (spectral differentiation). The table must
   * decay to zero at both ends.
   */
  static CurvatureProfile sampled(const std::vector<double>& s, const std::vector<double>& kappa) {
    const std::size_t n = s.size();
    if (n < 8 || kappa.size() != n) throw InputError("sampled profile needs >= 8 (s, kappa) pairs");
    for (double v : kappa)
      if (!std::isfinite(v)) throw InputError("NaN in sampled curvature");
    const double ds = (s.back() - s.front()) / (n - 1);
    if (!(ds > 0)) throw InputError("sampled profile: grid must increase");
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(s[i] - s[i - 1] - ds) > 1e-9 * ds) throw InputError("sampled profile: grid must be uniform");
    double mx = 0.0;
    for (double v : kappa) mx = std::max(mx, std::abs(v));
    if (std::abs(kappa.front()) > 1e-8 * std::max(mx, 1.0) || std::abs(kappa.back()) > 1e-8 * std::max(mx, 1.0))
      throw InputError("sampled profile must vanish at the table ends");
    auto tab = std::make_shared<TrigTable>(s.front(), ds, kappa);
    const double ell = std::max(std::abs(s.front()), std::abs(s.back()));
    const double lo = s.front(), hi = s.back();
    return CurvatureProfile(
        "sampled", [tab, lo, hi](double x) { return x < lo || x > hi ? 0.0 : tab->value(x); },
        [tab, lo, hi](double x) { return x < lo || x > hi ? 0.0 : tab->deriv(x); }, ell);
  }

  const std::string& id() const { return id_; }
  double kappa(double s) const { return std::abs(s) > ell_ ? 0.0 : k_(s); }
  double kappa_prime(double s) const { return std::abs(s) > ell_ ? 0.0 : dk_(s); }
  double support_radius() const { return ell_; }
  double sup_norm() const { return sup_; }
  double l2_kappa() const { return l2k_; }
  double l2_kappa_prime() const { return l2dk_; }
  bool is_zero() const { return sup_ == 0.0; }

 private:
  struct TrigTable {
    double s0, ds;
    int n;
    std::vector<double> re, im;  // DFT coefficients
    TrigTable(double start, double step, const std::vector<double>& v) : s0(start), ds(step), n(static_cast<int>(v.size())) {
      re.assign(n, 0.0);
      im.assign(n, 0.0);
      for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j) {
          const double ph = -2.0 * std::numbers::pi * k * j / n;
          re[k] += v[j] * std::cos(ph) / n;
          im[k] += v[j] * std::sin(ph) / n;
        }
    }
    // p(x) = sum over symmetric frequencies, Nyquist term split for even n
    template <bool Deriv>
    double eval(double x) const {
      const double P = n * ds;
      const double t = (x - s0) / P;
      double sum = 0.0;
      for (int k = 0; k < n; ++k) {
        int f = k <= n / 2 ? k : k - n;
        double w = 1.0;
        if (n % 2 == 0 && k == n / 2) w = 0.5;
        auto term = [&](int freq) {
          const double ph = 2.0 * std::numbers::pi * freq * t;
          if constexpr (Deriv)
            return w * (2.0 * std::numbers::pi * freq / P) * (-re[k] * std::sin(ph) - im[k] * std::cos(ph));
          else
            return w * (re[k] * std::cos(ph) - im[k] * std::sin(ph));
        };
        sum += term(f);
        if (n % 2 == 0 && k == n / 2) sum += term(-f);
      }
      return sum;
    }
    double value(double x) const { return eval<false>(x); }
    double deriv(double x) const { return eval<true>(x); }
  };

  std::string id_;
  Fn k_, dk_;
  double ell_;
  double sup_ = 0, l2k_ = 0, l2dk_ = 0;
};

/** \brief Point of the reference curve with its Frenet frame. */
struct Frame {
  double s = 0;
  double theta = 0;  // tangent angle; theta' = -kappa
  Eigen::Vector2d gamma{0, 0};
  Eigen::Vector2d tau{1, 0};
  Eigen::Vector2d nu{0, 1};
};

namespace detail {

inline Frame frame_from(double s, double theta, const Eigen::Vector2d& g) {
  Frame f;
  f.s = s;
  f.theta = theta;
  f.gamma = g;
  f.tau = {std::cos(theta), std::sin(theta)};
  f.nu = {-std::sin(theta), std::cos(theta)};
  return f;
}

/** One step of the nested Gauss-Legendre integrator from f to s1. */
inline Frame advance(const CurvatureProfile& p, const Frame& f, double s1) {
  const Rule& gl = gauss_legendre(8);
  const double h = s1 - f.s;
  if (h == 0.0) return f;
  double dtheta = 0.0;
  Eigen::Vector2d dg(0, 0);
  for (std::size_t j = 0; j < gl.size(); ++j) {
    const double cj = 0.5 * (gl.x[j] + 1.0), wj = 0.5 * gl.w[j];
    // theta at the stage point
    double inner = 0.0;
    for (std::size_t i = 0; i < gl.size(); ++i)
      inner += 0.5 * gl.w[i] * p.kappa(f.s + cj * h * 0.5 * (gl.x[i] + 1.0));
    const double th = f.theta - cj * h * inner;
    dg += wj * Eigen::Vector2d(std::cos(th), std::sin(th));
    dtheta += wj * p.kappa(f.s + cj * h);
  }
  return frame_from(s1, f.theta - h * dtheta, f.gamma + h * dg);
}

}  // namespace detail

/**
 * Frames on an increasing grid, gauge gamma(0) = 0, tau(0) = (1,0). Steps
 * also break at +-ell, where tabulated profiles may have kinks.
 */
inline std::vector<Frame> reconstruct_curve(const CurvatureProfile& p, const std::vector<double>& s_grid) {
  if (s_grid.empty()) throw InputError("reconstruct_curve: empty grid");
  for (std::size_t i = 0; i < s_grid.size(); ++i) {
    if (!std::isfinite(s_grid[i])) throw InputError("reconstruct_curve: non-finite grid value");
    if (i > 0 && !(s_grid[i] > s_grid[i - 1])) throw InputError("reconstruct_curve: grid is not increasing");
  }
  for (double s : s_grid)
    if (!std::isfinite(p.kappa(s)) || !std::isfinite(p.kappa_prime(s)))
      throw InputError("reconstruct_curve: NaN in curvature samples");
  const double ell = p.support_radius();
  // coarse user grids are sub-stepped
  const double hmax = ell / 64;
  std::vector<Frame> out(s_grid.size());
  auto march = [&](int dir) {
    Frame f = detail::frame_from(0.0, 0.0, {0, 0});
    std::vector<double> targets;
    for (double s : s_grid)
      if (dir * s >= 0) targets.push_back(s);
    if (dir < 0) std::reverse(targets.begin(), targets.end());
    else
      targets.erase(std::remove(targets.begin(), targets.end(), 0.0), targets.end());
    for (double t : targets) {
      while (std::abs(t - f.s) > 0) {
        double next = t;
        if (std::abs(next - f.s) > hmax) next = f.s + dir * hmax;
        for (double b : {-ell, ell})
          if ((b - f.s) * dir > 0 && (next - b) * dir > 0) next = b;
        f = detail::advance(p, f, next);
      }
      out[std::lower_bound(s_grid.begin(), s_grid.end(), t) - s_grid.begin()] = f;
    }
  };
  march(+1);
  march(-1);
  return out;
}

struct SuperstripReport {
  double theta = 0;
  double min_J = 1;
  bool local_ok = true;
  bool globally_injective = true;
  bool accepted = true;
  std::string reason;
};

/** \brief Reference curve, tube half-width a and superstrip half-width rho. */
class TubularGeometry {
 public:
  TubularGeometry(CurvatureProfile profile, double a, double rho) : profile_(std::move(profile)), a_(a), rho_(rho) {
    if (!(a > 0.0)) throw InputError("tube half-width must be positive");
    if (!(rho > a)) throw InputError("superstrip half-width must exceed the tube half-width");
    const double ell = profile_.support_radius();
    const double span = ell + 2.0 * rho_;
    const int n = 4001;
    std::vector<double> grid(n);
    for (int i = 0; i < n; ++i) grid[i] = -span + 2.0 * span * i / (n - 1);
    samples_ = reconstruct_curve(profile_, grid);
  }

  const CurvatureProfile& profile() const { return profile_; }
  double half_width() const { return a_; }
  double rho() const { return rho_; }
  const std::vector<Frame>& curve_samples() const { return samples_; }
  double theta() const { return rho_ * profile_.sup_norm(); }

  double jacobian(double s, double n) const {
    check_n(n);
    const double J = 1.0 + profile_.kappa(s) * n;
    if (!(J > 0.0)) throw InvariantViolation("non-positive Jacobian inside the superstrip", J);
    return J;
  }
  double gauge_A(double s, double n) const {
    const double J = jacobian(s, n);
    return -n * profile_.kappa_prime(s) / (2.0 * J);
  }
  double potential_V(double s, double n) const {
    const double J = jacobian(s, n);
    const double k = profile_.kappa(s);
    return -k * k / (4.0 * J * J);
  }

  /** Frame at arbitrary s: one integrator step from the nearest sample, straight beyond the samples. */
  Frame frame_at(double s) const {
    const double lo = samples_.front().s, hi = samples_.back().s;
    if (s <= lo) return straight(samples_.front(), s);
    if (s >= hi) return straight(samples_.back(), s);
    const double d = (hi - lo) / (samples_.size() - 1);
    const std::size_t k = std::min<std::size_t>(samples_.size() - 1, static_cast<std::size_t>(std::lround((s - lo) / d)));
    return detail::advance(profile_, samples_[k], s);
  }

  /** Tubular map X(s,n) = gamma(s) + n nu(s). */
  Eigen::Vector2d point(double s, double n) const {
    const Frame f = frame_at(s);
    return f.gamma + n * f.nu;
  }

  /**
   * Local (theta < 1) and global injectivity of X on the superstrip. Cells
   * between consecutive normal segments are tested pairwise when their arclength
   * separation exceeds 2 rho; tails are covered by long cells.
   */
  SuperstripReport validate_superstrip(int cells = 1200) const {
    SuperstripReport r;
    r.theta = theta();
    r.min_J = 1.0 - r.theta;
    r.local_ok = r.theta < 1.0;
    if (!r.local_ok) {
      r.accepted = false;
      r.reason = "rho * sup|kappa| >= 1";
      return r;
    }
    const double ell = profile_.support_radius();
    std::vector<double> s;
    const double core = ell + 2.0 * rho_;
    for (int i = 0; i <= cells; ++i) s.push_back(-core + 2.0 * core * i / cells);
    // geometric tail cells out to a large multiple of the bend scale
    std::vector<double> tail;
    double len = 2.0 * core / cells;
    for (double x = core; x < 200.0 * (core + rho_);) {
      len *= 1.3;
      x += len;
      tail.push_back(x);
    }
    for (double x : tail) {
      s.push_back(x);
      s.insert(s.begin(), -x);
    }
    std::vector<std::array<Eigen::Vector2d, 4>> quads;
    std::vector<double> mid;
    Frame prev = frame_at(s[0]);
    for (std::size_t i = 1; i < s.size(); ++i) {
      Frame cur = frame_at(s[i]);
      quads.push_back({prev.gamma - rho_ * prev.nu, cur.gamma - rho_ * cur.nu, cur.gamma + rho_ * cur.nu,
                       prev.gamma + rho_ * prev.nu});
      mid.push_back(0.5 * (s[i] + s[i - 1]));
      prev = cur;
    }
    for (std::size_t i = 0; i < quads.size() && r.globally_injective; ++i)
      for (std::size_t j = i + 1; j < quads.size(); ++j) {
        const double gap = std::abs(mid[j] - mid[i]) - 0.5 * (s[j + 1] - s[j]) - 0.5 * (s[i + 1] - s[i]);
        if (gap <= 2.0 * rho_) continue;
        if (quads_overlap(quads[i], quads[j])) {
          r.globally_injective = false;
          r.reason = "superstrip self-intersects near s = " + std::to_string(mid[i]) + " and " +
                     std::to_string(mid[j]);
          break;
        }
      }
    r.accepted = r.local_ok && r.globally_injective;
    return r;
  }

 private:
  void check_n(double n) const {
    if (std::abs(n) > rho_) throw DomainError("normal coordinate outside the superstrip", n);
  }

  static Frame straight(const Frame& f, double s) {
    Frame g = f;
    g.s = s;
    g.gamma = f.gamma + (s - f.s) * f.tau;
    return g;
  }

  // separating-axis test for convex quadrilaterals
  static bool quads_overlap(const std::array<Eigen::Vector2d, 4>& p, const std::array<Eigen::Vector2d, 4>& q) {
    auto separated = [](const std::array<Eigen::Vector2d, 4>& a, const std::array<Eigen::Vector2d, 4>& b) {
      for (int e = 0; e < 4; ++e) {
        const Eigen::Vector2d d = a[(e + 1) % 4] - a[e];
        const Eigen::Vector2d nrm(-d.y(), d.x());
        double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
        for (int k = 0; k < 4; ++k) {
          const double pa = nrm.dot(a[k]), pb = nrm.dot(b[k]);
          amin = std::min(amin, pa), amax = std::max(amax, pa);
          bmin = std::min(bmin, pb), bmax = std::max(bmax, pb);
        }
        if (amax < bmin || bmax < amin) return true;
      }
      return false;
    };
    return !separated(p, q) && !separated(q, p);
  }

  CurvatureProfile profile_;
  double a_, rho_;
  std::vector<Frame> samples_;
};

}  // namespace trapcert
