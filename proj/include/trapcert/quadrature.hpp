#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "trapcert/errors.hpp"

namespace trapcert {

/** \brief Nodes and weights of a quadrature rule. */
struct Rule {
  std::vector<double> x;
  std::vector<double> w;

  std::size_t size() const { return x.size(); }

  template <class F>
  double apply(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * f(x[i]);
    return s;
  }

  void append(const Rule& other) {
    x.insert(x.end(), other.x.begin(), other.x.end());
    w.insert(w.end(), other.w.begin(), other.w.end());
  }
};

inline constexpr int kMaxGaussNodes = 256;

/**
 * Gauss rule for the weight (1-x)^a (1+x)^b on [-1,1] by Golub-Welsch on the
 * closed-form Jacobi recurrence.
 */
inline Rule gauss_jacobi(int n, double a, double b) {
  if (n < 1) throw InputError("gauss_jacobi: need at least one node");
  if (n > kMaxGaussNodes)
    throw CapabilityError("gauss_jacobi: at most " + std::to_string(kMaxGaussNodes) + " nodes",
                          kMaxGaussNodes);
  if (!(a > -1.0) || !(b > -1.0)) throw DomainError("gauss_jacobi: exponents must exceed -1");
  Eigen::VectorXd diag(n), sub(n > 1 ? n - 1 : 1);
  const double ab = a + b;
  for (int k = 0; k < n; ++k) {
    const double t = 2.0 * k + ab;
    if (k == 0)
      diag(k) = (b - a) / (ab + 2.0);
    else
      diag(k) = (b * b - a * a) / (t * (t + 2.0));
    if (k + 1 < n) {
      const double m = k + 1.0;
      const double tm = 2.0 * m + ab;
      double beta;
      if (k == 0)
        beta = 4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + ab) * (2.0 + ab) * (3.0 + ab));
      else
        beta = 4.0 * m * (m + a) * (m + b) * (m + ab) / (tm * tm * (tm + 1.0) * (tm - 1.0));
      sub(k) = std::sqrt(beta);
    }
  }
  Rule r;
  r.x.resize(n);
  r.w.resize(n);
  if (n == 1) {
    r.x[0] = diag(0);
  }
  const double mu0 = std::exp((ab + 1.0) * std::log(2.0) + std::lgamma(a + 1.0) +
                              std::lgamma(b + 1.0) - std::lgamma(ab + 2.0));
  if (n == 1) {
    r.w[0] = mu0;
    return r;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub.head(n - 1), Eigen::ComputeEigenvectors);
  if (es.info() != Eigen::Success) throw NumericalError("gauss_jacobi: eigensolver failed");
  for (int i = 0; i < n; ++i) {
    r.x[i] = es.eigenvalues()(i);
    const double v = es.eigenvectors()(0, i);
    r.w[i] = mu0 * v * v;
  }
  return r;
}

inline const Rule& gauss_legendre(int n) {
  static std::mutex m;
  static std::map<int, Rule> cache;
  std::lock_guard<std::mutex> lock(m);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, gauss_jacobi(n, 0.0, 0.0)).first;
  return it->second;
}

/** \brief Affine map of a rule on [-1,1] to [lo,hi]. */
inline Rule map_rule(const Rule& ref, double lo, double hi) {
  Rule r;
  const double c = 0.5 * (lo + hi), h = 0.5 * (hi - lo);
  r.x.resize(ref.size());
  r.w.resize(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    r.x[i] = c + h * ref.x[i];
    r.w[i] = h * ref.w[i];
  }
  return r;
}

/** \brief Composite Gauss-Legendre over consecutive breakpoints. */
inline Rule composite_rule(const std::vector<double>& breaks, int order) {
  Rule r;
  const Rule& gl = gauss_legendre(order);
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i)
    if (breaks[i + 1] > breaks[i]) r.append(map_rule(gl, breaks[i], breaks[i + 1]));
  return r;
}

/** \brief Geometric breakpoints lo, lo*q, ... up to hi (hi always included). */
inline std::vector<double> geometric_breaks(double lo, double hi, double ratio) {
  std::vector<double> b{lo};
  while (b.back() * ratio < hi * (1.0 - 1e-12)) b.push_back(b.back() * ratio);
  b.push_back(hi);
  return b;
}

/** Adaptive Gauss-Kronrod with error output. */
template <class F>
double integrate_adaptive(F&& f, double lo, double hi, double tol = 1e-13, double* err = nullptr) {
  double e = 0.0;
  const double v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, lo, hi, 25, tol, &e);
  if (err) *err = e;
  return v;
}

}  // namespace trapcert
