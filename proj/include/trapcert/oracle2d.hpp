#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <boost/math/special_functions/zeta.hpp>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "trapcert/cross_section.hpp"
#include "trapcert/errors.hpp"
#include "trapcert/geometry.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

/** C_{d,alpha} with (-Delta)^alpha u(x) = C p.v. int (u(x)-u(z)) |x-z|^{-d-2alpha} dz. */
inline double fractional_kernel_constant(int d, double alpha) {
  return std::pow(4.0, alpha) * std::tgamma(0.5 * d + alpha) /
         (std::pow(std::numbers::pi, 0.5 * d) * std::abs(std::tgamma(-alpha)));
}

/** \brief Uniform cell grid over a box with a mask of cells inside the domain. */
struct MaskedGrid {
  int dim = 2;
  int nx = 0, ny = 1;
  double h = 0;
  double x0 = 0, y0 = 0;  // lower-left corner of the box
  int padding = 4;
  int px = 0, py = 1;  // periodic box in cells
  double a = 0;        // half-width of the guide, metadata
  std::vector<std::uint8_t> mask, boundary;
  std::vector<int> cells;  // masked box indices, i + nx * j

  std::size_t size() const { return cells.size(); }
  double cell_volume() const { return dim == 2 ? h * h : h; }
  double area() const { return cells.size() * cell_volume(); }
  double x(int i) const { return x0 + (i + 0.5) * h; }
  double y(int j) const { return y0 + (j + 0.5) * h; }
  int index(int i, int j) const { return i + nx * j; }

  /** Plain PBM, top row first, 1 = inside. */
  std::string to_pbm() const {
    std::ostringstream os;
    os << "P1\n" << nx << ' ' << ny << '\n';
    for (int j = ny - 1; j >= 0; --j) {
      for (int i = 0; i < nx; ++i) os << (i ? " " : "") << int(mask[index(i, j)]);
      os << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline int next_fast_size(int n) {
  for (int m = std::max(n, 1);; ++m) {
    int r = m;
    for (int p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

/** Fill cells list, boundary flags and the periodic box; validates invariants. */
inline void finalize_grid(MaskedGrid& g) {
  g.cells.clear();
  g.boundary.assign(g.mask.size(), 0);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const int id = g.index(i, j);
      if (!g.mask[id]) continue;
      g.cells.push_back(id);
      auto out = [&](int ii, int jj) {
        if (ii < 0 || ii >= g.nx) return true;
        if (g.dim == 2 && (jj < 0 || jj >= g.ny)) return true;
        if (g.dim == 1 && jj != 0) return false;
        return !g.mask[g.index(ii, jj)];
      };
      bool b = out(i - 1, j) || out(i + 1, j);
      if (g.dim == 2) b = b || out(i, j - 1) || out(i, j + 1);
      g.boundary[id] = b;
    }
  if (g.cells.empty()) throw InputError("mask is empty");
  if (g.padding < 1) throw InputError("padding factor must be at least 1");
  g.px = g.padding == 1 ? g.nx : next_fast_size(g.padding * g.nx);
  g.py = g.dim == 1 ? 1 : (g.padding == 1 ? g.ny : next_fast_size(g.padding * g.ny));
}

}  // namespace detail

/** Box grid with a caller-supplied mask predicate on cell centres. */
inline MaskedGrid box_grid(int nx, int ny, double h, double x0, double y0, int padding,
                           const std::function<bool(double, double)>& inside) {
  if (nx < 1 || ny < 1 || !(h > 0)) throw InputError("invalid box grid");
  MaskedGrid g;
  g.dim = 2;
  g.nx = nx;
  g.ny = ny;
  g.h = h;
  g.x0 = x0;
  g.y0 = y0;
  g.padding = padding;
  g.mask.assign(std::size_t(nx) * ny, 0);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) g.mask[g.index(i, j)] = inside(g.x(i), g.y(j));
  detail::finalize_grid(g);
  return g;
}

/** The interval (-a,a) split into n cells, for one-dimensional consistency runs. */
inline MaskedGrid interval_grid(double a, int n, int padding = 4) {
  if (!(a > 0) || n < 2) throw InputError("invalid interval grid");
  MaskedGrid g;
  g.dim = 1;
  g.nx = n;
  g.ny = 1;
  g.h = 2.0 * a / n;
  g.x0 = -a;
  g.y0 = 0;
  g.a = a;
  g.padding = padding;
  g.mask.assign(n, 1);
  detail::finalize_grid(g);
  return g;
}

struct RasterOptions {
  int padding = 4;
  double s_extent = 0;  // arclength half-range; 0 means ell + 8a
  // optional fixed box (x0, y0, nx, ny); used to compare masks on one grid
  bool fixed_box = false;
  double x0 = 0, y0 = 0;
  int nx = 0, ny = 0;
};

/**
 * Cells whose centre is X(s,n) with |n| < a and |s| <= S. Points are projected
 * onto the curve by one Newton step from samples spaced h/4 apart; the box is
 * symmetric in x so that even profiles give mirror-symmetric masks.
 */
inline MaskedGrid rasterize_waveguide(const TubularGeometry& geom, double a, double h, const RasterOptions& opt = {}) {
  if (!(a > 0) || !(h > 0)) throw InputError("half-width and spacing must be positive");
  if (a > geom.rho()) throw InputError("half-width exceeds the superstrip");
  if (2.0 * a / h < 16.0 - 1e-9)
    throw CapabilityError("grid spacing does not resolve the width (fewer than 16 cells)", 2.0 * a / h);
  const double S = opt.s_extent > 0 ? opt.s_extent : geom.profile().support_radius() + 8.0 * a;
  const double ds = 0.25 * h;
  if (!opt.fixed_box) {
    // coarse box from the stored samples and the two ends, before any allocation
    double bx = 0, by0 = 1e300, by1 = -1e300;
    auto grow = [&](const Eigen::Vector2d& p) {
      bx = std::max(bx, std::abs(p.x()) + a);
      by0 = std::min(by0, p.y() - a);
      by1 = std::max(by1, p.y() + a);
    };
    for (const Frame& f : geom.curve_samples()) grow(f.gamma);
    grow(geom.frame_at(-S).gamma);
    grow(geom.frame_at(S).gamma);
    const double est = (2.0 * bx / h + 4) * ((by1 - by0) / h + 4);
    if (est > double(std::size_t(1) << 28)) throw CapabilityError("raster box too large", est);
  }
  if (2.0 * S / ds > 1e8) throw CapabilityError("centreline too long to sample", 2.0 * S / ds);
  const int ns = int(std::ceil(2.0 * S / ds));
  std::vector<Frame> fr(ns + 1);
  double xmax = 0, ymin = 1e300, ymax = -1e300;
  for (int k = 0; k <= ns; ++k) {
    fr[k] = geom.frame_at(-S + 2.0 * S * k / ns);
    for (double n : {-a, a}) {
      const Eigen::Vector2d p = fr[k].gamma + n * fr[k].nu;
      xmax = std::max(xmax, std::abs(p.x()));
      ymin = std::min(ymin, p.y());
      ymax = std::max(ymax, p.y());
    }
  }
  MaskedGrid g;
  g.dim = 2;
  g.h = h;
  g.a = a;
  g.padding = opt.padding;
  if (opt.fixed_box) {
    g.nx = opt.nx;
    g.ny = opt.ny;
    g.x0 = opt.x0;
    g.y0 = opt.y0;
  } else {
    g.nx = 2 * int(std::ceil(xmax / h)) + 4;
    g.x0 = -0.5 * g.nx * h;
    g.ny = int(std::ceil((ymax - ymin) / h)) + 4;
    g.y0 = 0.5 * (ymin + ymax) - 0.5 * g.ny * h;
  }
  if (std::size_t(g.nx) * g.ny > std::size_t(1) << 28)
    throw CapabilityError("raster box too large", double(g.nx) * g.ny);
  g.mask.assign(std::size_t(g.nx) * g.ny, 0);
  const double step = 2.0 * S / ns, reach = a + step;
  for (int k = 0; k <= ns; ++k) {
    const Frame& f = fr[k];
    const double kap = geom.profile().kappa(f.s);
    const int i0 = std::max(0, int(std::floor((f.gamma.x() - reach - g.x0) / h)));
    const int i1 = std::min(g.nx - 1, int(std::ceil((f.gamma.x() + reach - g.x0) / h)));
    const int j0 = std::max(0, int(std::floor((f.gamma.y() - reach - g.y0) / h)));
    const int j1 = std::min(g.ny - 1, int(std::ceil((f.gamma.y() + reach - g.y0) / h)));
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) {
        const Eigen::Vector2d d(g.x(i) - f.gamma.x(), g.y(j) - f.gamma.y());
        const double t = d.dot(f.tau), m = d.dot(f.nu);
        const double den = 1.0 + kap * m;
        if (den <= 0.0) continue;
        const double dl = t / den;
        if (std::abs(dl) > 0.5 * step * (1 + 1e-12)) continue;
        if (std::abs(f.s + dl) > S) continue;
        // second-order frame transport: tau' = -kappa nu, nu' = kappa tau
        const Eigen::Vector2d gam = dl * f.tau - 0.5 * dl * dl * kap * f.nu;
        const Eigen::Vector2d nu = f.nu + dl * kap * f.tau - 0.5 * dl * dl * kap * kap * f.nu;
        const double n = (d - gam).dot(nu) / nu.norm();
        if (std::abs(n) < a) g.mask[g.index(i, j)] = 1;
      }
  }
  detail::finalize_grid(g);
  return g;
}

/** Straight guide |y| < a, |x| <= S. */
inline MaskedGrid straight_guide_grid(double a, double S, double h, int padding = 4) {
  if (2.0 * a / h < 16.0 - 1e-9)
    throw CapabilityError("grid spacing does not resolve the width (fewer than 16 cells)", 2.0 * a / h);
  const int nx = 2 * int(std::ceil(S / h)) + 4;
  const int ny = 2 * int(std::ceil(a / h)) + 4;
  MaskedGrid g = box_grid(nx, ny, h, -0.5 * nx * h, -0.5 * ny * h, padding,
                          [&](double x, double y) { return std::abs(y) < a && std::abs(x) <= S; });
  g.a = a;
  return g;
}

namespace detail {

struct FftwPlans {
  fftw_plan fwd = nullptr, bwd = nullptr;
};

inline std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

/**
 * Lattice sums over J = (j1 Lx, j2 Ly) != 0: S0 = sum |J|^-s and
 * Sd = sum d^2/dJd^2 |J|^-s. Direct sum over |j| <= M, the rest by the
 * midpoint-rule integral over the exterior of the rectangle.
 */
inline std::array<double, 3> lattice_sums_2d(double Lx, double Ly, double s, int M = 48) {
  double s0 = 0, sx = 0, sy = 0;
  for (int j2 = -M; j2 <= M; ++j2)
    for (int j1 = -M; j1 <= M; ++j1) {
      if (!j1 && !j2) continue;
      const double X = j1 * Lx, Y = j2 * Ly, r2 = X * X + Y * Y;
      const double p = std::pow(r2, -0.5 * s);
      s0 += p;
      sx += s * p / r2 * ((s + 2) * X * X / r2 - 1.0);
      sy += s * p / r2 * ((s + 2) * Y * Y / r2 - 1.0);
    }
  const double X = (M + 0.5) * Lx, Y = (M + 0.5) * Ly, phic = std::atan2(Y, X);
  const Rule& gl = gauss_legendre(48);
  double t0 = 0, tx = 0, ty = 0;
  auto piece = [&](double lo, double hi, bool vertical) {
    for (std::size_t q = 0; q < gl.size(); ++q) {
      const double phi = 0.5 * (lo + hi) + 0.5 * (hi - lo) * gl.x[q], w = 0.5 * (hi - lo) * gl.w[q];
      const double c = std::cos(phi), sn = std::sin(phi);
      const double rb = vertical ? X / c : Y / sn;
      t0 += w * std::pow(rb, 2.0 - s) / (s - 2.0);
      tx += w * ((s + 2) * c * c - 1.0) * std::pow(rb, -s);
      ty += w * ((s + 2) * sn * sn - 1.0) * std::pow(rb, -s);
    }
  };
  piece(0, phic, true);
  piece(phic, 0.5 * std::numbers::pi, false);
  const double cell = Lx * Ly;
  return {s0 + 4 * t0 / cell, sx + 4 * tx / cell, sy + 4 * ty / cell};
}

}  // namespace detail

/**
 * Masked Fourier-multiplier discretisation of the restricted fractional
 * Laplacian: zero-extend to the periodic box, multiply by |xi|^{2alpha},
 * restrict. With image_correction the interaction with periodic copies is
 * removed to second order in the source offset.
 */
class FormOperator {
 public:
  FormOperator(const MaskedGrid& grid, double alpha, bool image_correction = true)
      : g_(grid), alpha_(alpha), correct_(image_correction) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InputError("alpha must lie in (0,1]");
    const int px = g_.px, py = g_.py, hx = px / 2 + 1;
    nreal_ = std::size_t(px) * py;
    ncplx_ = std::size_t(hx) * py;
    symbol_.resize(ncplx_);
    for (int j = 0; j < py; ++j)
      for (int i = 0; i < hx; ++i) {
        const double kx = 2 * std::numbers::pi * i / (px * g_.h);
        const int fj = j <= py / 2 ? j : j - py;
        const double ky = g_.dim == 2 ? 2 * std::numbers::pi * fj / (py * g_.h) : 0.0;
        symbol_[std::size_t(j) * hx + i] = std::pow(kx * kx + ky * ky, alpha);
      }
    {
      std::lock_guard<std::mutex> lk(detail::fftw_mutex());
      double* in = fftw_alloc_real(nreal_);
      fftw_complex* out = fftw_alloc_complex(ncplx_);
      if (g_.dim == 2) {
        plans_.fwd = fftw_plan_dft_r2c_2d(py, px, in, out, FFTW_ESTIMATE);
        plans_.bwd = fftw_plan_dft_c2r_2d(py, px, out, in, FFTW_ESTIMATE);
      } else {
        plans_.fwd = fftw_plan_dft_r2c_1d(px, in, out, FFTW_ESTIMATE);
        plans_.bwd = fftw_plan_dft_c2r_1d(px, out, in, FFTW_ESTIMATE);
      }
      fftw_free(in);
      fftw_free(out);
    }
    if (!plans_.fwd || !plans_.bwd) throw NumericalError("transform planning failed");
    // coordinates relative to the box centre keep the moment sums well scaled
    cx_ = g_.x0 + 0.5 * g_.nx * g_.h;
    cy_ = g_.y0 + 0.5 * g_.ny * g_.h;
    if (correct_ && alpha < 1.0) {
      const double C = fractional_kernel_constant(g_.dim, alpha);
      if (g_.dim == 1) {
        const double s = 1.0 + 2.0 * alpha, L = px * g_.h;
        e0_ = C * 2.0 * boost::math::zeta(s) * std::pow(L, -s);
        ex_ = 0.5 * C * 2.0 * boost::math::zeta(s + 2) * std::pow(L, -s - 2) * s * (s + 1);
      } else {
        const auto S = detail::lattice_sums_2d(px * g_.h, py * g_.h, 2.0 + 2.0 * alpha);
        e0_ = C * S[0];
        ex_ = 0.5 * C * S[1];
        ey_ = 0.5 * C * S[2];
      }
    }
  }
  FormOperator(const FormOperator&) = delete;
  FormOperator& operator=(const FormOperator&) = delete;
  ~FormOperator() {
    std::lock_guard<std::mutex> lk(detail::fftw_mutex());
    if (plans_.fwd) fftw_destroy_plan(plans_.fwd);
    if (plans_.bwd) fftw_destroy_plan(plans_.bwd);
  }

  const MaskedGrid& grid() const { return g_; }
  double alpha() const { return alpha_; }
  bool image_correction() const { return correct_; }
  std::size_t size() const { return g_.cells.size(); }

  /** Operator on masked vectors (ordered as grid().cells). */
  Eigen::VectorXd apply(const Eigen::VectorXd& u) const { return multiplier(u, nullptr, true); }

  /** Periodic-box inverse of |xi|^{2alpha} + shift, restricted; used as preconditioner. */
  Eigen::VectorXd precondition(const Eigen::VectorXd& r, double shift) const {
    if (!(shift > 0)) throw InputError("preconditioner shift must be positive");
    return multiplier(r, &shift, false);
  }

  /** Action on a full box vector; support outside the mask is rejected. */
  Eigen::VectorXd apply_box(const Eigen::VectorXd& box) const {
    const std::size_t nb = std::size_t(g_.nx) * g_.ny;
    if (std::size_t(box.size()) != nb) throw InputError("box vector has the wrong size");
    for (std::size_t i = 0; i < nb; ++i)
      if (!g_.mask[i] && box[i] != 0.0) throw InputError("input has support outside the mask", double(i));
    Eigen::VectorXd u(size());
    for (std::size_t c = 0; c < size(); ++c) u[c] = box[g_.cells[c]];
    const Eigen::VectorXd v = apply(u);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(nb);
    for (std::size_t c = 0; c < size(); ++c) out[g_.cells[c]] = v[c];
    return out;
  }

  /** Image-correction coefficients (E0, E2x, E2y). */
  std::array<double, 3> correction() const { return {e0_, ex_, ey_}; }

 private:
  Eigen::VectorXd multiplier(const Eigen::VectorXd& u, const double* shift, bool with_images) const {
    if (std::size_t(u.size()) != size()) throw InputError("masked vector has the wrong size");
    double* buf = fftw_alloc_real(nreal_);
    fftw_complex* spec = fftw_alloc_complex(ncplx_);
    std::fill(buf, buf + nreal_, 0.0);
    for (std::size_t c = 0; c < size(); ++c) buf[padded(g_.cells[c])] = u[c];
    fftw_execute_dft_r2c(plans_.fwd, buf, spec);
    const double norm = 1.0 / double(nreal_);
    for (std::size_t q = 0; q < ncplx_; ++q) {
      const double m = (shift ? 1.0 / (symbol_[q] + *shift) : symbol_[q]) * norm;
      spec[q][0] *= m;
      spec[q][1] *= m;
    }
    fftw_execute_dft_c2r(plans_.bwd, spec, buf);
    Eigen::VectorXd v(size());
    for (std::size_t c = 0; c < size(); ++c) v[c] = buf[padded(g_.cells[c])];
    fftw_free(buf);
    fftw_free(spec);
    if (with_images && (e0_ != 0.0 || ex_ != 0.0 || ey_ != 0.0)) {
      double m0 = 0, mx = 0, mxx = 0, my = 0, myy = 0;
      for (std::size_t c = 0; c < size(); ++c) {
        const double x = xc(c), y = yc(c);
        m0 += u[c];
        mx += x * u[c];
        mxx += x * x * u[c];
        my += y * u[c];
        myy += y * y * u[c];
      }
      const double w = g_.cell_volume();
      for (std::size_t c = 0; c < size(); ++c) {
        const double x = xc(c), y = yc(c);
        v[c] += w * (e0_ * m0 + ex_ * (x * x * m0 - 2 * x * mx + mxx) + ey_ * (y * y * m0 - 2 * y * my + myy));
      }
    }
    return v;
  }
  std::size_t padded(int box_index) const {
    const int i = box_index % g_.nx, j = box_index / g_.nx;
    return std::size_t(j) * g_.px + i;
  }
  double xc(std::size_t c) const { return g_.x(g_.cells[c] % g_.nx) - cx_; }
  double yc(std::size_t c) const { return g_.dim == 2 ? g_.y(g_.cells[c] / g_.nx) - cy_ : 0.0; }

  MaskedGrid g_;
  double alpha_;
  bool correct_;
  std::size_t nreal_ = 0, ncplx_ = 0;
  std::vector<double> symbol_;
  detail::FftwPlans plans_;
  double cx_ = 0, cy_ = 0;
  double e0_ = 0, ex_ = 0, ey_ = 0;
};

inline Eigen::VectorXd apply_form_operator(const FormOperator& op, const Eigen::VectorXd& box) {
  return op.apply_box(box);
}

struct EigenOptions {
  int k = 1;
  double tol = 1e-6;  // relative residual ||Tx - qx|| / q
  int max_iter = 400;
  int guard = 2;      // extra block vectors
  double shift = 1.0; // preconditioner shift, of the order of the wanted eigenvalue
  unsigned seed = 7;
};

struct EigenSolve {
  std::vector<double> values, residuals;
  Eigen::MatrixXd vectors;
  int iterations = 0;
  bool converged = false;
};

/**
 * Block preconditioned Rayleigh-quotient minimisation (LOBPCG) on the
 * masked subspace. The search space [X, W, P] is orthonormalised through its
 * Gram matrix, dropping directions below 1e-12 of the largest.
 */
inline EigenSolve lobpcg(const FormOperator& op, const EigenOptions& opt) {
  using Eigen::MatrixXd;
  const int n = int(op.size());
  if (opt.k < 1) throw InputError("k must be at least 1");
  const int m = std::min(n, opt.k + opt.guard);
  if (opt.k > n) throw InputError("k exceeds the number of masked cells");
  auto A = [&](const MatrixXd& X) {
    MatrixXd Y(X.rows(), X.cols());
    for (int c = 0; c < X.cols(); ++c) Y.col(c) = op.apply(X.col(c));
    return Y;
  };
  std::mt19937 rng(opt.seed);
  std::normal_distribution<double> nd;
  MatrixXd X(n, m);
  // smooth positive start plus noise
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < m; ++c) X(i, c) = (c == 0 ? 1.0 : 0.0) + 0.1 * nd(rng);
  X = Eigen::HouseholderQR<MatrixXd>(X).householderQ() * MatrixXd::Identity(n, m);
  MatrixXd AX = A(X);
  Eigen::VectorXd lam;
  {
    MatrixXd H = X.transpose() * AX;
    H = 0.5 * (H + H.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
    X = X * es.eigenvectors();
    AX = AX * es.eigenvectors();
    lam = es.eigenvalues();
  }
  MatrixXd P, AP;
  EigenSolve out;
  Eigen::VectorXd res(m);
  for (int it = 1; it <= opt.max_iter; ++it) {
    if (it % 25 == 0) {
      // refresh against drift
      X = Eigen::HouseholderQR<MatrixXd>(X).householderQ() * MatrixXd::Identity(n, m);
      AX = A(X);
      MatrixXd H = X.transpose() * AX;
      H = 0.5 * (H + H.transpose()).eval();
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
      X = X * es.eigenvectors();
      AX = AX * es.eigenvectors();
      lam = es.eigenvalues();
    }
    MatrixXd R = AX - X * lam.asDiagonal();
    bool done = true;
    for (int c = 0; c < m; ++c) {
      res[c] = R.col(c).norm();
      if (c < opt.k && res[c] > opt.tol * std::abs(lam[c])) done = false;
    }
    out.iterations = it;
    if (done) {
      out.converged = true;
      break;
    }
    MatrixXd W(n, m);
    for (int c = 0; c < m; ++c) {
      W.col(c) = op.precondition(R.col(c), opt.shift);
      W.col(c) -= X * (X.transpose() * W.col(c));
      const double nw = W.col(c).norm();
      if (nw > 0) W.col(c) /= nw;
    }
    MatrixXd AW = A(W);
    const int np = int(P.cols());
    MatrixXd S(n, 2 * m + np), AS(n, 2 * m + np);
    S.leftCols(m) = X;
    S.middleCols(m, m) = W;
    AS.leftCols(m) = AX;
    AS.middleCols(m, m) = AW;
    if (np) {
      S.rightCols(np) = P;
      AS.rightCols(np) = AP;
    }
    MatrixXd G = S.transpose() * S;
    G = 0.5 * (G + G.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> gs(G);
    const double gmax = gs.eigenvalues().maxCoeff();
    std::vector<int> keep;
    for (int c = 0; c < G.rows(); ++c)
      if (gs.eigenvalues()[c] > 1e-12 * gmax) keep.push_back(c);
    MatrixXd T(G.rows(), keep.size());
    for (std::size_t c = 0; c < keep.size(); ++c)
      T.col(c) = gs.eigenvectors().col(keep[c]) / std::sqrt(gs.eigenvalues()[keep[c]]);
    MatrixXd H = T.transpose() * (S.transpose() * AS) * T;
    H = 0.5 * (H + H.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> hs(H);
    const MatrixXd Cf = T * hs.eigenvectors().leftCols(m);
    lam = hs.eigenvalues().head(m);
    X = S * Cf;
    AX = AS * Cf;
    const MatrixXd Cp = Cf.bottomRows(m + np);
    P = S.rightCols(m + np) * Cp;
    AP = AS.rightCols(m + np) * Cp;
    for (int c = 0; c < m; ++c) {
      const double np_ = P.col(c).norm();
      if (np_ > 0) {
        P.col(c) /= np_;
        AP.col(c) /= np_;
      }
    }
  }
  // final residuals from a fresh application
  X = Eigen::HouseholderQR<MatrixXd>(X).householderQ() * MatrixXd::Identity(n, m);
  AX = A(X);
  MatrixXd H = X.transpose() * AX;
  H = 0.5 * (H + H.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
  X = X * es.eigenvectors();
  AX = AX * es.eigenvectors();
  lam = es.eigenvalues();
  out.converged = true;
  for (int c = 0; c < opt.k; ++c) {
    out.values.push_back(lam[c]);
    out.residuals.push_back((AX.col(c) - lam[c] * X.col(c)).norm());
    if (out.residuals.back() > opt.tol * std::abs(lam[c])) out.converged = false;
  }
  out.vectors = X.leftCols(opt.k);
  return out;
}

enum class OracleVerdict { bound_state_found, none_below_threshold, inconclusive };

inline const char* to_string(OracleVerdict v) {
  switch (v) {
    case OracleVerdict::bound_state_found: return "bound_state_found";
    case OracleVerdict::none_below_threshold: return "none_below_threshold";
    case OracleVerdict::inconclusive: return "inconclusive";
  }
  return "unknown";
}

/** Relative discretisation allowance c h^{2alpha}. */
struct DiscretizationAllowance {
  double c = 0;
  double alpha = 0.5;
  double at(double h) const { return c * std::pow(h, 2.0 * alpha); }
};

/** Fit c so that every straight-guide deviation |q(h) - lambda1| is covered `safety` times over. */
inline DiscretizationAllowance calibrate_allowance(double alpha, double lambda1, const std::vector<double>& h,
                                                   const std::vector<double>& straight_values, double safety = 2.0) {
  if (h.size() != straight_values.size() || h.empty()) throw InputError("calibration needs matching runs");
  DiscretizationAllowance a;
  a.alpha = alpha;
  for (std::size_t i = 0; i < h.size(); ++i)
    a.c = std::max(a.c, safety * std::abs(straight_values[i] - lambda1) / (lambda1 * std::pow(h[i], 2.0 * alpha)));
  return a;
}

struct SpectrumResult {
  double alpha = 0, a = 0;
  std::vector<double> values, residuals;
  double lambda1 = 0, lambda1_error = 0;
  double allowance = 0;   // relative
  double threshold = 0;   // lambda1 (1 - allowance)
  double margin = 0;      // threshold - (values[0] + residuals[0])
  double h = 0;
  int nx = 0, ny = 0, px = 0, py = 0, padding = 0;
  std::size_t cells = 0;
  double mask_area = 0;
  int iterations = 0;
  bool converged = false;
  OracleVerdict verdict = OracleVerdict::inconclusive;
};

/**
 * k lowest Rayleigh quotients and the verdict against lambda1 lowered by the
 * allowance. A bound state needs the value plus its residual below the
 * threshold; none_below needs the value minus its residual at or above it.
 */
inline SpectrumResult lowest_eigenvalues(const FormOperator& op, int k, double tol, double lambda1,
                                         const DiscretizationAllowance& allowance, double lambda1_error = 0.0,
                                         int max_iter = 400) {
  if (!(lambda1 > 0)) throw InputError("threshold must be positive");
  EigenOptions eo;
  eo.k = k;
  eo.tol = tol;
  eo.max_iter = max_iter;
  eo.shift = lambda1;
  const EigenSolve es = lobpcg(op, eo);
  const MaskedGrid& g = op.grid();
  SpectrumResult r;
  r.alpha = op.alpha();
  r.a = g.a;
  r.values = es.values;
  r.residuals = es.residuals;
  r.lambda1 = lambda1;
  r.lambda1_error = lambda1_error;
  r.h = g.h;
  r.nx = g.nx;
  r.ny = g.ny;
  r.px = g.px;
  r.py = g.py;
  r.padding = g.padding;
  r.cells = g.size();
  r.mask_area = g.area();
  r.iterations = es.iterations;
  r.converged = es.converged;
  r.allowance = allowance.at(g.h);
  r.threshold = lambda1 * (1.0 - r.allowance) - lambda1_error;
  r.margin = r.threshold - (r.values[0] + r.residuals[0]);
  if (!es.converged)
    r.verdict = OracleVerdict::inconclusive;
  else if (r.margin > 0)
    r.verdict = OracleVerdict::bound_state_found;
  else if (r.values[0] - r.residuals[0] >= r.threshold)
    r.verdict = OracleVerdict::none_below_threshold;
  else
    r.verdict = OracleVerdict::inconclusive;
  return r;
}

/** Two-resolution Richardson value, assuming first-order convergence in h. */
struct Extrapolation {
  double coarse = 0, fine = 0, value = 0, error = 0;
};

inline Extrapolation richardson(double coarse, double fine) {
  Extrapolation e;
  e.coarse = coarse;
  e.fine = fine;
  e.value = 2.0 * fine - coarse;
  e.error = std::abs(fine - coarse);
  return e;
}

/** Smallest eigenvalue of the same machinery on (-a,a) at n and 2n cells. */
inline Extrapolation interval_consistency(double alpha, double a, int n, int padding = 4) {
  std::array<double, 2> q{};
  for (int r = 0; r < 2; ++r) {
    FormOperator op(interval_grid(a, n << r, padding), alpha);
    EigenOptions eo;
    eo.tol = 1e-9;
    eo.max_iter = 2000;
    const EigenSolve es = lobpcg(op, eo);
    if (!es.converged) throw NumericalError("interval eigen-iteration did not converge", es.residuals[0]);
    q[r] = es.values[0];
  }
  return richardson(q[0], q[1]);
}

/** Bend eps * k(s/ell) with ell chosen so the tangent turns by the given angle. */
inline TubularGeometry bend_with_turning(const ProfileShape& shape, double a, double eps, double turning,
                                         double rho) {
  std::vector<double> br;
  for (int i = 0; i <= 64; ++i) br.push_back(-1.0 + i / 32.0);
  const double I = composite_rule(br, 20).apply([&](double r) { return shape.k(r); });
  if (!(I > 0) || !(eps > 0)) throw InputError("profile has no net turning");
  return TubularGeometry(CurvatureProfile::scaled(shape, eps, turning / (eps * I)), a, rho);
}

/** Straight-guide calibration and bent-guide runs at h and h/2 on arms |s| <= S. */
struct OracleStudy {
  double alpha = 0, a = 0, s_extent = 0;
  std::vector<double> h;
  std::vector<SpectrumResult> straight, bent;
  DiscretizationAllowance allowance;
  Extrapolation straight_extrapolated, bent_extrapolated;
  OracleVerdict straight_verdict = OracleVerdict::inconclusive;
  OracleVerdict bent_verdict = OracleVerdict::inconclusive;
};

inline OracleVerdict combine(const std::vector<SpectrumResult>& runs) {
  const OracleVerdict v = runs.front().verdict;
  for (const auto& r : runs)
    if (r.verdict != v) return OracleVerdict::inconclusive;
  return v;
}

inline OracleStudy run_oracle_study(const TubularGeometry& geom, const CrossSectionEigenpair& pair, double h_coarse,
                                    double s_extent, int padding = 4, double tol = 1e-6, int max_iter = 400) {
  OracleStudy st;
  st.alpha = pair.alpha();
  st.a = geom.half_width();
  st.s_extent = s_extent;
  st.h = {h_coarse, 0.5 * h_coarse};
  std::vector<double> qs;
  for (double h : st.h) {
    FormOperator op(straight_guide_grid(st.a, s_extent, h, padding), st.alpha);
    EigenOptions eo;
    eo.tol = tol;
    eo.max_iter = max_iter;
    eo.shift = pair.lambda1;
    const EigenSolve es = lobpcg(op, eo);
    if (!es.converged) throw NumericalError("straight-guide calibration did not converge", es.residuals[0]);
    qs.push_back(es.values[0]);
  }
  st.allowance = calibrate_allowance(st.alpha, pair.lambda1, st.h, qs);
  RasterOptions ro;
  ro.padding = padding;
  ro.s_extent = s_extent;
  for (double h : st.h) {
    FormOperator so(straight_guide_grid(st.a, s_extent, h, padding), st.alpha);
    st.straight.push_back(lowest_eigenvalues(so, 1, tol, pair.lambda1, st.allowance, pair.error_estimate, max_iter));
    FormOperator bo(rasterize_waveguide(geom, st.a, h, ro), st.alpha);
    st.bent.push_back(lowest_eigenvalues(bo, 1, tol, pair.lambda1, st.allowance, pair.error_estimate, max_iter));
  }
  st.straight_extrapolated = richardson(st.straight[0].values[0], st.straight[1].values[0]);
  st.bent_extrapolated = richardson(st.bent[0].values[0], st.bent[1].values[0]);
  st.straight_verdict = combine(st.straight);
  st.bent_verdict = combine(st.bent);
  return st;
}

inline nlohmann::json to_json(const SpectrumResult& r) {
  return {{"alpha", r.alpha},
          {"a", r.a},
          {"values", r.values},
          {"residuals", r.residuals},
          {"lambda1", r.lambda1},
          {"lambda1_error", r.lambda1_error},
          {"allowance", r.allowance},
          {"threshold", r.threshold},
          {"margin", r.margin},
          {"grid",
           {{"h", r.h}, {"nx", r.nx}, {"ny", r.ny}, {"px", r.px}, {"py", r.py}, {"padding", r.padding},
            {"cells", r.cells}, {"mask_area", r.mask_area}}},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"verdict", to_string(r.verdict)}};
}

inline nlohmann::json to_json(const OracleStudy& st) {
  nlohmann::json j{{"alpha", st.alpha},
                   {"a", st.a},
                   {"s_extent", st.s_extent},
                   {"h", st.h},
                   {"allowance_c", st.allowance.c},
                   {"straight_verdict", to_string(st.straight_verdict)},
                   {"bent_verdict", to_string(st.bent_verdict)},
                   {"straight_extrapolated", {{"value", st.straight_extrapolated.value}, {"error", st.straight_extrapolated.error}}},
                   {"bent_extrapolated", {{"value", st.bent_extrapolated.value}, {"error", st.bent_extrapolated.error}}}};
  for (const auto& r : st.straight) j["straight"].push_back(to_json(r));
  for (const auto& r : st.bent) j["bent"].push_back(to_json(r));
  return j;
}

}  // namespace trapcert
