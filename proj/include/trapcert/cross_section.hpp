#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "trapcert/errors.hpp"
#include "trapcert/kernels.hpp"
#include "trapcert/quadrature.hpp"

namespace trapcert {

/** Gegenbauer values C_0..C_{n-1} with parameter lam at x. */
inline void gegenbauer_values(int n, double lam, double x, double* out) {
  if (n <= 0) return;
  out[0] = 1.0;
  if (n == 1) return;
  out[1] = 2.0 * lam * x;
  for (int k = 2; k < n; ++k)
    out[k] = (2.0 * x * (k + lam - 1.0) * out[k - 1] - (k + 2.0 * lam - 2.0) * out[k - 2]) / k;
}

/**
 * \brief Galerkin data on the reference interval (-1,1) for the basis
 * (1-t^2)^a C_k^{(a+1/2)}(t) / sqrt(M_kk), k = 0..n-1.
 *
 * The form is diagonal in this basis (Weber-Schafheitlin), so only the mass
 * matrix needs quadrature.
 */
struct GalerkinForm {
  double alpha = 0.5;
  int n = 0;
  std::vector<double> scale;  // 1/sqrt of the raw mass diagonal
  Eigen::MatrixXd S, M;

  static constexpr int kMinResolution = 4;

  GalerkinForm() = default;
  GalerkinForm(double a, int size) : alpha(a), n(size) {
    check_alpha(a, "GalerkinForm");
    if (size < kMinResolution)
      throw CapabilityError("cross-section resolution must be at least " + std::to_string(kMinResolution),
                            kMinResolution);
    if (size > 400) throw CapabilityError("cross-section resolution at most 400", 400);
    const double lam = a + 0.5;
    const Rule q = gauss_jacobi(std::min(size + 8, kMaxGaussNodes), 2.0 * a, 2.0 * a);
    Eigen::MatrixXd C(size, q.size());
    std::vector<double> v(size);
    for (std::size_t j = 0; j < q.size(); ++j) {
      gegenbauer_values(size, lam, q.x[j], v.data());
      for (int k = 0; k < size; ++k) C(k, j) = v[k];
    }
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(q.w.data(), q.size());
    Eigen::MatrixXd Mraw = C * w.asDiagonal() * C.transpose();
    scale.resize(size);
    S = Eigen::MatrixXd::Zero(size, size);
    for (int k = 0; k < size; ++k) {
      scale[k] = 1.0 / std::sqrt(Mraw(k, k));
      S(k, k) = stiffness_raw(k) * scale[k] * scale[k];
    }
    M = Mraw;
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) M(i, j) *= scale[i] * scale[j];
    // odd/even products vanish exactly; remove quadrature dust
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j)
        if ((i + j) % 2) M(i, j) = 0.0;
  }

  /** B_k = pi 2^{1-lam} Gamma(k+2lam)/(k! Gamma(lam)). */
  double fourier_factor(int k) const {
    const double lam = alpha + 0.5;
    return std::numbers::pi * std::exp((1.0 - lam) * std::log(2.0) + std::lgamma(k + 2.0 * lam) -
                                       std::lgamma(k + 1.0) - std::lgamma(lam));
  }

  double stiffness_raw(int k) const {
    const double b = fourier_factor(k);
    return b * b / (2.0 * std::numbers::pi * (k + alpha + 0.5));
  }

  /** Polynomial part sum c_k C_k(t) scale_k. */
  double poly(const std::vector<double>& c, double t) const {
    std::vector<double> v(n);
    gegenbauer_values(n, alpha + 0.5, t, v.data());
    double s = 0.0;
    for (int k = 0; k < n; ++k) s += c[k] * scale[k] * v[k];
    return s;
  }

  /**
   * Unitary Fourier transform of sum c_k phi_k at frequency xi (reference
   * interval). Real part only: callers use even coefficient vectors.
   */
  double fourier(const std::vector<double>& c, double xi) const {
    const double lam = alpha + 0.5;
    const double ax = std::abs(xi);
    double s = 0.0;
    for (int k = 0; k < n; k += 2) {
      if (c[k] == 0.0) continue;
      const double sign = (k / 2) % 2 ? -1.0 : 1.0;
      double jb;
      if (ax < 1e-8)
        jb = k == 0 ? std::pow(0.5, lam) / std::tgamma(lam + 1.0) : 0.0;
      else
        jb = std::cyl_bessel_j(k + lam, ax) / std::pow(ax, lam);
      s += c[k] * scale[k] * sign * fourier_factor(k) * jb;
    }
    return s / std::sqrt(2.0 * std::numbers::pi);
  }
};

/** \brief First Dirichlet eigenpair of the restricted fractional Laplacian on (-a,a). */
struct CrossSectionEigenpair {
  FractionalOrder order;
  double a = 1.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;  // first odd eigenvalue, kept for residual diagnostics
  std::vector<double> coeffs;   // ground state, M-normalized on the reference interval
  std::vector<double> coeffs2;  // second eigenvector
  std::vector<double> grid;     // sample points on [-a,a]
  std::vector<double> u1;       // samples
  double norm_check = 0.0;      // integral of u1^2
  std::string method = "galerkin-gegenbauer";
  int resolution = 0;
  double error_estimate = 0.0;
  GalerkinForm form;

  double alpha() const { return order.alpha; }

  /** u1(n); zero outside [-a,a]. */
  double operator()(double n) const {
    const double t = n / a;
    if (std::abs(t) >= 1.0) return 0.0;
    return std::pow((1.0 - t) * (1.0 + t), order.alpha) * form.poly(coeffs, t) / std::sqrt(a);
  }

  /** Smooth factor p with u1(n) = a^{-1/2} (1-t^2)^alpha p(t), t = n/a. */
  double poly(double t) const { return form.poly(coeffs, t); }

  /** Unitary Fourier transform of u1. */
  double fourier(double xi) const { return std::sqrt(a) * form.fourier(coeffs, a * xi); }

  /** a_alpha[u1] from the assembled form; equals lambda1 up to eigensolver accuracy. */
  double form_energy() const {
    Eigen::Map<const Eigen::VectorXd> c(coeffs.data(), coeffs.size());
    return std::pow(a, -2.0 * order.alpha) * c.dot(form.S * c) / c.dot(form.M * c);
  }

  double integral_abs() const {
    // L1 norm of the positive ground state by Gauss-Jacobi on the reference interval
    const Rule q = gauss_jacobi(64, order.alpha, order.alpha);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q.w[i] * std::abs(poly(q.x[i]));
    return std::sqrt(a) * s;
  }

  double sup() const { return *std::max_element(u1.begin(), u1.end()); }
};

namespace detail {

inline void solve_galerkin(const GalerkinForm& f, double& l1, std::vector<double>& c1, double& l2,
                           std::vector<double>& c2) {
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(f.S, f.M);
  if (es.info() != Eigen::Success) throw NumericalError("cross-section generalized eigensolver failed");
  const Eigen::VectorXd& ev = es.eigenvalues();
  l1 = ev(0);
  l2 = ev(1);
  Eigen::VectorXd v1 = es.eigenvectors().col(0), v2 = es.eigenvectors().col(1);
  v1 /= std::sqrt(v1.dot(f.M * v1));
  v2 /= std::sqrt(v2.dot(f.M * v2));
  if (f.poly(std::vector<double>(v1.data(), v1.data() + v1.size()), 0.0) < 0) v1 = -v1;
  c1.assign(v1.data(), v1.data() + v1.size());
  c2.assign(v2.data(), v2.data() + v2.size());
}

}  // namespace detail

inline constexpr int kDefaultCrossSectionResolution = 40;

/**
 * Galerkin solve; resolution is the number of basis functions (both parities).
 * Error estimate compares against half the resolution.
 */
inline CrossSectionEigenpair solve_cross_section(double alpha, double a, int resolution = kDefaultCrossSectionResolution,
                                                 int samples = 201) {
  check_alpha(alpha, "solve_cross_section");
  if (!(a > 0.0)) throw DomainError("solve_cross_section: half-width must be positive", a);
  CrossSectionEigenpair p;
  p.order = FractionalOrder(alpha);
  p.a = a;
  p.resolution = resolution;
  p.form = GalerkinForm(alpha, resolution);
  double l1, l2;
  detail::solve_galerkin(p.form, l1, p.coeffs, l2, p.coeffs2);
  const double sc = std::pow(a, -2.0 * alpha);
  // Rayleigh quotient of the returned vector, so a[u1] - lambda1 vanishes identically
  p.lambda1 = p.form_energy();
  p.lambda2 = l2 * sc;
  {
    GalerkinForm coarse(alpha, std::max(GalerkinForm::kMinResolution, resolution / 2));
    double c1, c2;
    std::vector<double> v1, v2;
    detail::solve_galerkin(coarse, c1, v1, c2, v2);
    p.error_estimate = std::abs(c1 - l1) * sc;
  }
  if (!(p.lambda1 > 0.0)) throw InvariantViolation("cross-section eigenvalue not positive", p.lambda1);
  p.grid.resize(samples);
  p.u1.resize(samples);
  for (int i = 0; i < samples; ++i) {
    p.grid[i] = -a + 2.0 * a * i / (samples - 1);
    p.u1[i] = p(p.grid[i]);
  }
  // M-normalization is the L2 normalization
  {
    const Rule q = gauss_jacobi(std::min(2 * resolution + 8, kMaxGaussNodes), 2.0 * alpha, 2.0 * alpha);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double v = p.poly(q.x[i]);
      s += q.w[i] * v * v;
    }
    p.norm_check = s;
  }
  if (std::abs(p.norm_check - 1.0) > 1e-8) throw InvariantViolation("eigenfunction normalization", p.norm_check);
  return p;
}

/**
 * Scale-invariant residual ||S c - lambda1 M c||_{M^{-1}} / ||c||_M of the pair's
 * coefficient vector in the reference form (reported at the pair's scale).
 */
inline double eigen_residual(const CrossSectionEigenpair& p, const std::vector<double>& c) {
  Eigen::Map<const Eigen::VectorXd> v(c.data(), c.size());
  const auto& f = p.form;
  const double lam = p.lambda1 * std::pow(p.a, 2.0 * p.alpha());
  Eigen::VectorXd r = f.S * v - lam * (f.M * v);
  Eigen::LLT<Eigen::MatrixXd> llt(f.M);
  const double dual = std::sqrt(r.dot(llt.solve(r)));
  const double nrm = std::sqrt(v.dot(f.M * v));
  return dual / nrm * std::pow(p.a, -2.0 * p.alpha());
}

inline double eigen_residual(const CrossSectionEigenpair& p) { return eigen_residual(p, p.coeffs); }

// --------------------------------------------------------- collocation

/**
 * Constant of the singular-integral representation,
 * C = 4^a Gamma(1/2+a) / (sqrt(pi) |Gamma(-a)|).
 */
inline double singular_integral_constant(double alpha) {
  return std::pow(4.0, alpha) * std::tgamma(0.5 + alpha) / (std::sqrt(std::numbers::pi) * std::abs(std::tgamma(-alpha)));
}

/**
 * Collocation matrix (Toeplitz, first row) on m interior nodes of (-a,a):
 * piecewise-linear interpolation integrated exactly against |z|^{-1-2a}
 * outside |z|<h, second-order Taylor inside.
 */
inline std::vector<double> collocation_row(double alpha, double a, int m) {
  const double h = 2.0 * a / (m + 1);
  const double C = singular_integral_constant(alpha);
  const bool half = alpha == 0.5;
  auto F0 = [&](double z) { return -std::pow(z, -2.0 * alpha) / (2.0 * alpha); };
  auto F1 = [&](double z) { return half ? std::log(z) : std::pow(z, 1.0 - 2.0 * alpha) / (1.0 - 2.0 * alpha); };
  std::vector<double> row(m, 0.0);
  const double near = std::pow(h, 2.0 - 2.0 * alpha) / (2.0 - 2.0 * alpha) / (h * h);
  row[0] = 2.0 * std::pow(h, -2.0 * alpha) / (2.0 * alpha) + 2.0 * near;
  for (int k = 1; k < m; ++k) {
    const double lo = (k - 1) * h, mid = k * h, hi = (k + 1) * h;
    double w = 0.0;
    if (k >= 2) w += (F1(mid) - F1(lo)) / h - (k - 1) * (F0(mid) - F0(lo));
    w += (k + 1) * (F0(hi) - F0(mid)) - (F1(hi) - F1(mid)) / h;
    row[k] = -w;
  }
  if (m > 1) row[1] -= near;
  for (double& v : row) v *= C;
  return row;
}

/** Smallest eigenvalue of the symmetric Toeplitz collocation matrix by inverse iteration. */
inline double collocation_lambda(double alpha, double a, int m) {
  const auto row = collocation_row(alpha, a, m);
  Eigen::MatrixXd A(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) A(i, j) = row[std::abs(i - j)];
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("collocation matrix not positive definite");
  Eigen::VectorXd x(m);
  for (int i = 0; i < m; ++i) {
    const double t = -1.0 + 2.0 * (i + 1.0) / (m + 1);
    x(i) = std::pow(1.0 - t * t, alpha);
  }
  x.normalize();
  double mu = 0.0, prev = 0.0;
  for (int it = 0; it < 500; ++it) {
    Eigen::VectorXd y = llt.solve(x);
    mu = x.dot(A * x);
    x = y.normalized();
    if (it > 2 && std::abs(mu - prev) < 1e-15 * mu) break;
    prev = mu;
  }
  return x.dot(A * x);
}

struct CollocationResult {
  double lambda1;
  double error_estimate;
  std::vector<int> sizes;
  std::vector<double> raw;
};

/**
 * Collocation at several resolutions, extrapolated by a least-squares fit of
 * lambda + c1 h^p1 + c2 h^p2 + c3 h^2 with the exponents of the observed
 * error expansion.
 */
inline CollocationResult solve_cross_section_collocation(double alpha, double a,
                                                         std::vector<int> sizes = {127, 255, 511, 1023, 2047}) {
  check_alpha(alpha, "solve_cross_section_collocation");
  if (sizes.size() < 5) throw CapabilityError("collocation extrapolation needs five resolutions", 5);
  std::sort(sizes.begin(), sizes.end());
  CollocationResult r;
  r.sizes = sizes;
  std::vector<double> h;
  for (int m : sizes) {
    r.raw.push_back(collocation_lambda(alpha, a, m));
    h.push_back(2.0 * a / (m + 1));
  }
  auto basis = [&](double hh) -> Eigen::Vector4d {
    if (std::abs(alpha - 0.5) < 0.1) return {1.0, hh * std::log(hh), hh, hh * hh};
    return {1.0, hh, std::pow(hh, 2.0 - 2.0 * alpha), hh * hh};
  };
  auto fit = [&](std::size_t first) {
    Eigen::Matrix4d X;
    Eigen::Vector4d y;
    for (int i = 0; i < 4; ++i) {
      X.row(i) = basis(h[first + i]).transpose();
      y(i) = r.raw[first + i];
    }
    return X.colPivHouseholderQr().solve(y)(0);
  };
  const std::size_t n = sizes.size();
  r.lambda1 = fit(n - 4);
  r.error_estimate = std::abs(r.lambda1 - fit(n - 5));
  return r;
}

// ----------------------------------------------------------- export/import

inline nlohmann::json to_json(const CrossSectionEigenpair& p) {
  nlohmann::json j;
  j["kind"] = "cross_section_eigenpair";
  j["alpha"] = p.alpha();
  j["a"] = p.a;
  j["lambda1"] = p.lambda1;
  j["lambda2"] = p.lambda2;
  j["method"] = p.method;
  j["resolution"] = p.resolution;
  j["error_estimate"] = p.error_estimate;
  j["norm_check"] = p.norm_check;
  j["coefficients"] = p.coeffs;
  j["coefficients2"] = p.coeffs2;
  j["table"] = {{"columns", {"n", "u1"}}, {"n", p.grid}, {"u1", p.u1}};
  return j;
}

inline CrossSectionEigenpair eigenpair_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "cross_section_eigenpair") throw InputError("not an eigenpair table");
  CrossSectionEigenpair p;
  p.order = FractionalOrder(j.at("alpha").get<double>());
  p.a = j.at("a").get<double>();
  p.lambda1 = j.at("lambda1").get<double>();
  p.lambda2 = j.at("lambda2").get<double>();
  p.method = j.at("method").get<std::string>();
  p.resolution = j.at("resolution").get<int>();
  p.error_estimate = j.at("error_estimate").get<double>();
  p.norm_check = j.at("norm_check").get<double>();
  p.coeffs = j.at("coefficients").get<std::vector<double>>();
  p.coeffs2 = j.at("coefficients2").get<std::vector<double>>();
  p.grid = j.at("table").at("n").get<std::vector<double>>();
  p.u1 = j.at("table").at("u1").get<std::vector<double>>();
  if (static_cast<int>(p.coeffs.size()) != p.resolution) throw InputError("eigenpair coefficient count mismatch");
  p.form = GalerkinForm(p.alpha(), p.resolution);
  return p;
}

}  // namespace trapcert
