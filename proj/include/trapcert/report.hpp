#pragma once

#include <fftw3.h>

#include <Eigen/Core>
#include <atomic>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/version.hpp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "trapcert/certificate.hpp"
#include "trapcert/oracle2d.hpp"

namespace trapcert {

inline constexpr const char* kLibraryVersion = "1.0.0";

inline std::string report_schema_version() { return "trapcert.report/1"; }

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_not_certified = 3, exit_numerical = 4 };

// ------------------------------------------------------------ configuration

/** \brief Parsed run configuration; `resolved` echoes every value actually used. */
struct RunConfig {
  std::string mode;
  double alpha = 0, a = 0;
  std::uint64_t seed = 0;
  std::string output = "out";
  int jobs = 1;
  int resolution = kDefaultCrossSectionResolution;

  std::string shape = "smooth_bump";
  double omega = 40.0;

  // certify / sweep
  double theta = 0.5;
  std::string cutoff = "smooth_step";
  SearchOptions search;
  bool direct = true;
  std::optional<TrialParameters> fixed;

  // extend
  double rho = 0;
  std::optional<double> tau;
  int plot_stride = 8;

  // spectrum
  double h = 1.0 / 32, s_extent = 5.0, eig_tol = 1e-6;
  int padding = 4, k = 1, max_iter = 400;
  std::string bend_shape = "smooth_bump";
  double bend_epsilon = 1.9, bend_turning = 2.5, bend_rho = 0.513;

  // sweep
  std::vector<double> multiples{0.5, 1.0, 2.0, 4.0};
  std::string reference_shape;

  nlohmann::json resolved;
};

namespace detail {

inline const std::set<std::string>& known_modes() {
  static const std::set<std::string> m{"cross-section", "extend", "certify", "spectrum", "sweep", "verify-identities"};
  return m;
}

/** 1-based line of the first occurrence of "key" in the text, 0 if absent. */
inline int line_of_key(const std::string& text, const std::string& key) {
  const std::size_t p = text.find('"' + key + '"');
  if (p == std::string::npos) return 0;
  return 1 + int(std::count(text.begin(), text.begin() + p, '\n'));
}

class ConfigReader {
 public:
  ConfigReader(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& field, const std::string& why) const {
    const std::string leaf = field.substr(field.rfind('.') == std::string::npos ? 0 : field.rfind('.') + 1);
    const int line = line_of_key(text_, leaf);
    throw ConfigurationError(source_ + ":" + std::to_string(line) + ": field '" + field + "': " + why, line);
  }

  const nlohmann::json* find(const nlohmann::json& obj, const std::string& path) const {
    const nlohmann::json* cur = &obj;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!cur->is_object() || !cur->contains(key)) return nullptr;
      cur = &(*cur)[key];
      if (dot == std::string::npos) return cur;
      start = dot + 1;
    }
  }

  double number(const nlohmann::json& root, const std::string& path, std::optional<double> def) const {
    const nlohmann::json* v = find(root, path);
    if (!v) {
      if (!def) fail(path, "required field is missing");
      return *def;
    }
    if (!v->is_number()) fail(path, "expected a number");
    return v->get<double>();
  }

  std::optional<double> optional_number(const nlohmann::json& root, const std::string& path) const {
    const nlohmann::json* v = find(root, path);
    if (!v || v->is_null()) return std::nullopt;
    if (!v->is_number()) fail(path, "expected a number");
    return v->get<double>();
  }

  long integer(const nlohmann::json& root, const std::string& path, std::optional<long> def) const {
    const nlohmann::json* v = find(root, path);
    if (!v) {
      if (!def) fail(path, "required field is missing");
      return *def;
    }
    if (!v->is_number_integer()) fail(path, "expected an integer");
    return v->get<long>();
  }

  std::string string(const nlohmann::json& root, const std::string& path, std::optional<std::string> def) const {
    const nlohmann::json* v = find(root, path);
    if (!v) {
      if (!def) fail(path, "required field is missing");
      return *def;
    }
    if (!v->is_string()) fail(path, "expected a string");
    return v->get<std::string>();
  }

  bool boolean(const nlohmann::json& root, const std::string& path, bool def) const {
    const nlohmann::json* v = find(root, path);
    if (!v) return def;
    if (!v->is_boolean()) fail(path, "expected true or false");
    return v->get<bool>();
  }

  void only_keys(const nlohmann::json& root, const std::string& path, const std::set<std::string>& allowed) const {
    const nlohmann::json* v = path.empty() ? &root : find(root, path);
    if (!v) return;
    if (!v->is_object()) fail(path, "expected an object");
    for (auto it = v->begin(); it != v->end(); ++it)
      if (!allowed.count(it.key())) fail(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }

 private:
  const std::string& text_;
  std::string source_;
};

}  // namespace detail

/**
 * Parses the JSON configuration. `mode_override` replaces the mode field.
 * Errors carry "source:line: field 'x': reason".
 */
inline RunConfig parse_config(const std::string& text, const std::string& source = "config",
                              const std::string& mode_override = "") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t byte = std::min<std::size_t>(e.byte, text.size());
    const int line = 1 + int(std::count(text.begin(), text.begin() + byte, '\n'));
    throw ConfigurationError(source + ":" + std::to_string(line) + ": malformed document: " + e.what(), line);
  }
  detail::ConfigReader R(text, source);
  if (!j.is_object()) R.fail("", "top level must be an object");
  R.only_keys(j, "", {"mode", "alpha", "a", "seed", "output", "jobs", "cross_section", "profile", "certify", "extend",
                      "spectrum", "sweep"});
  R.only_keys(j, "cross_section", {"resolution"});
  R.only_keys(j, "profile", {"shape", "omega"});
  R.only_keys(j, "certify", {"theta", "cutoff", "margin", "ell_over_rho", "rho_start", "tau_start", "freeze_tau",
                             "max_rounds", "direct", "parameters"});
  R.only_keys(j, "certify.parameters", {"rho", "ell", "L", "tau"});
  R.only_keys(j, "extend", {"rho", "tau", "plot_stride"});
  R.only_keys(j, "spectrum", {"h", "s_extent", "padding", "k", "tolerance", "max_iter", "bend"});
  R.only_keys(j, "spectrum.bend", {"shape", "epsilon", "turning", "rho"});
  R.only_keys(j, "sweep", {"multiples", "reference_shape"});

  RunConfig c;
  c.mode = mode_override.empty() ? R.string(j, "mode", std::nullopt) : mode_override;
  if (!detail::known_modes().count(c.mode)) R.fail("mode", "unknown mode '" + c.mode + "'");
  c.alpha = R.number(j, "alpha", std::nullopt);
  if (!(c.alpha > 0 && c.alpha < 1)) R.fail("alpha", "must lie in (0,1)");
  c.a = R.number(j, "a", std::nullopt);
  if (!(c.a > 0)) R.fail("a", "must be positive");
  const long seed = R.integer(j, "seed", std::nullopt);
  if (seed < 0) R.fail("seed", "must be non-negative");
  c.seed = std::uint64_t(seed);
  c.output = R.string(j, "output", "out");
  c.jobs = int(R.integer(j, "jobs", 1));
  if (c.jobs < 1) R.fail("jobs", "must be at least 1");
  c.resolution = int(R.integer(j, "cross_section.resolution", kDefaultCrossSectionResolution));
  if (c.resolution < GalerkinForm::kMinResolution)
    R.fail("cross_section.resolution", "must be at least " + std::to_string(GalerkinForm::kMinResolution));

  c.shape = R.string(j, "profile.shape", "smooth_bump");
  c.omega = R.number(j, "profile.omega", 40.0);
  if (c.shape != "zero") try {
      (void)shapes::by_id(c.shape, c.omega);
    } catch (const Error& e) {
      R.fail("profile.shape", e.what());
    }

  c.theta = R.number(j, "certify.theta", 0.5);
  c.cutoff = R.string(j, "certify.cutoff", "smooth_step");
  try {
    (void)CutoffProfile::by_id(c.cutoff);
  } catch (const Error& e) {
    R.fail("certify.cutoff", e.what());
  }
  c.search.cutoff_id = c.cutoff;
  c.search.margin = R.number(j, "certify.margin", 2.0);
  c.search.ell_over_rho = R.optional_number(j, "certify.ell_over_rho");
  c.search.rho_start = R.optional_number(j, "certify.rho_start");
  c.search.tau_start = R.optional_number(j, "certify.tau_start");
  c.search.freeze_tau = R.boolean(j, "certify.freeze_tau", false);
  c.search.max_rounds = int(R.integer(j, "certify.max_rounds", 40));
  c.search.resolution = c.resolution;
  c.direct = R.boolean(j, "certify.direct", true);
  c.search.direct = c.direct;
  if (c.search.max_rounds < 1) R.fail("certify.max_rounds", "must be at least 1");
  if (!(c.search.margin > 0)) R.fail("certify.margin", "must be positive");
  if (R.find(j, "certify.parameters")) {
    TrialParameters p;
    p.rho = R.number(j, "certify.parameters.rho", std::nullopt);
    p.ell = R.number(j, "certify.parameters.ell", std::nullopt);
    p.L = R.number(j, "certify.parameters.L", std::nullopt);
    p.tau = R.optional_number(j, "certify.parameters.tau");
    p.cutoff_id = c.cutoff;
    if (!(p.rho > c.a)) R.fail("certify.parameters.rho", "must exceed a");
    if (!(p.ell > 0)) R.fail("certify.parameters.ell", "must be positive");
    if (!(p.L >= 2 * p.ell)) R.fail("certify.parameters.L", "must be at least 2 ell");
    const bool needs_tau = c.alpha <= 0.5;
    if (needs_tau != p.tau.has_value())
      R.fail("certify.parameters.tau", needs_tau ? "required for alpha <= 1/2" : "only allowed for alpha > 1/2");
    if (c.shape == "zero") {
      p.theta = 0;
      p.epsilon = 0;
    } else {
      p.theta = c.theta;
      p.epsilon = c.theta / p.rho;
    }
    c.fixed = p;
  }
  if (c.mode == "certify" || c.mode == "sweep") {
    if (!(c.theta > 0 && c.theta < 1) && !(c.shape == "zero" && c.fixed)) R.fail("certify.theta", "must lie in (0,1)");
    if (c.shape == "zero" && !c.fixed)
      R.fail("certify.parameters", "the straight guide has no search; give explicit parameters");
  }

  c.rho = R.number(j, "extend.rho", c.mode == "extend" ? std::nullopt : std::optional<double>(2.0 * c.a));
  c.tau = R.optional_number(j, "extend.tau");
  c.plot_stride = int(R.integer(j, "extend.plot_stride", 8));
  if (c.mode == "extend" && !(c.rho > c.a)) R.fail("extend.rho", "must exceed a");
  if (c.tau && !(*c.tau > 0)) R.fail("extend.tau", "must be positive");
  if (c.plot_stride < 1) R.fail("extend.plot_stride", "must be at least 1");

  c.h = R.number(j, "spectrum.h", 1.0 / 32);
  c.s_extent = R.number(j, "spectrum.s_extent", 5.0);
  c.padding = int(R.integer(j, "spectrum.padding", 4));
  c.k = int(R.integer(j, "spectrum.k", 1));
  c.eig_tol = R.number(j, "spectrum.tolerance", 1e-6);
  c.max_iter = int(R.integer(j, "spectrum.max_iter", 400));
  c.bend_shape = R.string(j, "spectrum.bend.shape", "smooth_bump");
  c.bend_epsilon = R.number(j, "spectrum.bend.epsilon", 1.9);
  c.bend_turning = R.number(j, "spectrum.bend.turning", 2.5);
  c.bend_rho = R.number(j, "spectrum.bend.rho", 0.513);
  if (!(c.h > 0)) R.fail("spectrum.h", "must be positive");
  if (!(c.eig_tol > 0)) R.fail("spectrum.tolerance", "must be positive");
  if (c.padding < 1) R.fail("spectrum.padding", "must be at least 1");
  if (c.k < 1) R.fail("spectrum.k", "must be at least 1");
  if (c.mode == "spectrum") {
    if (!(c.bend_rho > c.a)) R.fail("spectrum.bend.rho", "must exceed a");
    if (!(c.bend_rho * c.bend_epsilon < 1)) R.fail("spectrum.bend.epsilon", "rho * epsilon must stay below 1");
    if (!(c.s_extent > 0)) R.fail("spectrum.s_extent", "must be positive");
  }

  if (const nlohmann::json* m = R.find(j, "sweep.multiples")) {
    if (!m->is_array() || m->empty()) R.fail("sweep.multiples", "expected a non-empty array of numbers");
    c.multiples.clear();
    for (const auto& v : *m) {
      if (!v.is_number() || !(v.get<double>() > 0)) R.fail("sweep.multiples", "entries must be positive numbers");
      c.multiples.push_back(v.get<double>());
    }
  }
  c.reference_shape = R.string(j, "sweep.reference_shape", c.shape);

  c.resolved = {{"mode", c.mode},
                {"alpha", c.alpha},
                {"a", c.a},
                {"seed", c.seed},
                {"output", c.output},
                {"jobs", c.jobs},
                {"cross_section", {{"resolution", c.resolution}}},
                {"profile", {{"shape", c.shape}, {"omega", c.omega}}}};
  if (c.mode == "certify" || c.mode == "sweep") {
    nlohmann::json cj{{"theta", c.theta},         {"cutoff", c.cutoff},        {"margin", c.search.margin},
                      {"freeze_tau", c.search.freeze_tau}, {"max_rounds", c.search.max_rounds}, {"direct", c.direct}};
    cj["ell_over_rho"] = c.search.ell_over_rho ? nlohmann::json(*c.search.ell_over_rho) : nlohmann::json(nullptr);
    cj["rho_start"] = c.search.rho_start ? nlohmann::json(*c.search.rho_start) : nlohmann::json(nullptr);
    cj["tau_start"] = c.search.tau_start ? nlohmann::json(*c.search.tau_start) : nlohmann::json(nullptr);
    if (c.fixed) cj["parameters"] = to_json(*c.fixed);
    c.resolved["certify"] = cj;
  }
  if (c.mode == "extend")
    c.resolved["extend"] = {{"rho", c.rho}, {"tau", c.tau ? nlohmann::json(*c.tau) : nlohmann::json(nullptr)},
                            {"plot_stride", c.plot_stride}};
  if (c.mode == "spectrum")
    c.resolved["spectrum"] = {{"h", c.h},
                              {"s_extent", c.s_extent},
                              {"padding", c.padding},
                              {"k", c.k},
                              {"tolerance", c.eig_tol},
                              {"max_iter", c.max_iter},
                              {"bend",
                               {{"shape", c.bend_shape},
                                {"epsilon", c.bend_epsilon},
                                {"turning", c.bend_turning},
                                {"rho", c.bend_rho}}}};
  if (c.mode == "sweep") c.resolved["sweep"] = {{"multiples", c.multiples}, {"reference_shape", c.reference_shape}};
  return c;
}

// ------------------------------------------------------------ content-addressed cache

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/** Write through a temporary and rename, so readers never see partial files. */
inline void write_atomic(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  const std::filesystem::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw InputError("cannot write " + tmp.string());
    os << content;
    if (!os) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw InputError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

/** Eigenpairs stored under $TRAPCERT_CACHE_DIR keyed by a hash of (alpha, a, resolution). */
class DiskCache {
 public:
  explicit DiskCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {}

  static DiskCache from_environment() {
    const char* d = std::getenv("TRAPCERT_CACHE_DIR");
    if (!d || !*d) return DiskCache(std::nullopt);
    return DiskCache(std::filesystem::path(d));
  }

  bool enabled() const { return dir_.has_value(); }

  static std::string key(double alpha, double a, int resolution) {
    return detail::hex64(detail::fnv1a("eigenpair;alpha=" + detail::fmt(alpha) + ";a=" + detail::fmt(a) +
                                       ";resolution=" + std::to_string(resolution)));
  }

  CrossSectionEigenpair eigenpair(double alpha, double a, int resolution) const {
    if (!dir_) return solve_cross_section(alpha, a, resolution);
    const auto p = *dir_ / ("eigenpair-" + key(alpha, a, resolution) + ".json");
    if (std::filesystem::exists(p)) {
      const auto j = nlohmann::json::parse(detail::read_file(p));
      auto pair = eigenpair_from_json(j);
      if (pair.alpha() == alpha && pair.a == a && pair.resolution == resolution) return pair;
    }
    auto pair = solve_cross_section(alpha, a, resolution);
    detail::write_atomic(p, to_json(pair).dump());
    return pair;
  }

 private:
  std::optional<std::filesystem::path> dir_;
};

// ------------------------------------------------------------ identity suites

struct IdentityCheck {
  std::string name;
  double value = 0;
  double tolerance = 0;
  bool pass = false;
};

inline nlohmann::json to_json(const IdentityCheck& c) {
  return {{"name", c.name}, {"value", c.value}, {"tolerance", c.tolerance}, {"pass", c.pass}};
}

/** max |int P_alpha(x,y) dx - 1| over 20 random (alpha, y). */
inline IdentityCheck kernel_normalization_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ua(0.05, 0.95), uy(-2.0, 2.0);
  boost::math::quadrature::exp_sinh<double> es;
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const double al = ua(rng), y = std::pow(10.0, uy(rng));
    const PoissonKernel P(al);
    const double half = es.integrate([&](double x) { return P(x, y); }, 0.0, std::numeric_limits<double>::infinity());
    worst = std::max(worst, std::abs(2.0 * half - 1.0));
  }
  return {"kernel_unit_mass", worst, 1e-8, worst <= 1e-8};
}

/** P_{1/2} against y / (pi (x^2 + y^2)), relative. */
inline IdentityCheck half_kernel_check() {
  double worst = 0;
  for (double x : {-7.0, -1.0, -0.1, 0.0, 0.3, 2.0, 50.0})
    for (double y : {1e-3, 0.2, 1.0, 9.0}) {
      const double ref = y / (std::numbers::pi * (x * x + y * y));
      worst = std::max(worst, std::abs(poisson_kernel(0.5, x, y) - ref) / ref);
    }
  return {"half_kernel_closed_form", worst, 1e-12, worst <= 1e-12};
}

inline IdentityCheck c_half_check() {
  const double v = std::abs(c_alpha(0.5) - 1.0);
  return {"c_half_equals_one", v, 1e-13, v <= 1e-13};
}

/** Flattening identity on a bent geometry with theta = 1/2, five random fields. */
inline IdentityCheck flattening_check(std::uint64_t seed, double alpha = 0.75) {
  const double rho = 1.0;
  const TubularGeometry g(CurvatureProfile::scaled(shapes::smooth_bump(), 0.5 / rho, 6.0), 0.5, rho);
  double worst = 0;
  for (int i = 0; i < 5; ++i) worst = std::max(worst, verify_flattening(g, alpha, seed + i).relative_difference);
  return {"flattening_identity", worst, 1e-6, worst <= 1e-6};
}

/** Dilation law lambda1(a) = a^{-2 alpha} lambda1(1). */
inline IdentityCheck dilation_check(int resolution = kDefaultCrossSectionResolution) {
  double worst = 0;
  for (double al : {0.25, 0.5, 0.75}) {
    const double l1 = solve_cross_section(al, 1.0, resolution).lambda1;
    for (double a : {0.5, 2.0}) {
      const double la = solve_cross_section(al, a, resolution).lambda1;
      worst = std::max(worst, std::abs(la / (std::pow(a, -2 * al) * l1) - 1.0));
    }
  }
  return {"cross_section_dilation", worst, 1e-4, worst <= 1e-4};
}

/** Cutoff norms under t -> t/L against direct quadrature. */
inline IdentityCheck cutoff_scaling_check() {
  const CutoffProfile chi = CutoffProfile::smooth_step();
  double worst = 0;
  for (double L : {0.3, 7.0, 1e3}) {
    const ScaledCutoff s = cutoff_rescale(chi, L);
    std::vector<double> br;
    for (int i = 0; i <= 256; ++i) br.push_back(-L + 2 * L * i / 256);
    const Rule q = composite_rule(br, 20);
    const double m = q.apply([&](double t) { return s(t) * s(t); });
    const double d = q.apply([&](double t) { return s.deriv(t) * s.deriv(t); });
    worst = std::max({worst, std::abs(m / s.norms.l2_sq - 1), std::abs(d / s.norms.l2_sq_deriv - 1)});
  }
  return {"cutoff_scaling", worst, 1e-9, worst <= 1e-9};
}

/** ||kappa||^2 = eps^2 ell c_kappa and ||kappa'||^2 = eps^2 c_kappa' / ell. */
inline IdentityCheck curvature_scaling_check() {
  const ProfileShape sh = shapes::smooth_bump();
  double worst = 0;
  for (auto [eps, ell] : {std::pair{0.1, 3.0}, std::pair{2e-3, 400.0}}) {
    const CurvatureProfile p = CurvatureProfile::scaled(sh, eps, ell);
    worst = std::max({worst, std::abs(p.l2_kappa() / (eps * eps * ell * sh.c_kappa) - 1),
                      std::abs(p.l2_kappa_prime() / (eps * eps * sh.c_kappa_prime / ell) - 1)});
  }
  return {"curvature_scaling", worst, 1e-9, worst <= 1e-9};
}

inline std::vector<IdentityCheck> identity_suite(std::uint64_t seed, int resolution = kDefaultCrossSectionResolution) {
  return {kernel_normalization_check(seed), half_kernel_check(),        c_half_check(),
          flattening_check(seed),           dilation_check(resolution), cutoff_scaling_check(),
          curvature_scaling_check()};
}

// ------------------------------------------------------------ sweep tables

inline const std::string& sweep_csv_header() {
  static const std::string h =
      "index,shape,alpha,a,theta,multiple,ell_over_rho,rho,epsilon,ell,L,tau,"
      "criterion_lhs,criterion_rhs,A0,B0,C0_prime,L_star,analytic_gap,numeric_gap,verdict";
  return h;
}

/** Flat table from per-point reports; rejects reports of another schema. */
inline std::string aggregate_sweep(const std::vector<nlohmann::json>& points) {
  std::string out = sweep_csv_header() + "\n";
  auto num = [](const nlohmann::json& v) { return v.is_number() ? detail::fmt(v.get<double>()) : std::string(); };
  for (const auto& p : points) {
    const std::string schema = p.value("schema", std::string("none"));
    if (schema != report_schema_version())
      throw InputError("point report has schema '" + schema + "'; this aggregator reads '" +
                       report_schema_version() + "'");
    const auto& r = p.at("result");
    const auto& par = r.at("parameters");
    const auto& c = r.at("constants");
    out += std::to_string(p.at("point").at("index").get<int>()) + "," + r.at("shape_id").get<std::string>() + "," +
           num(r.at("alpha")) + "," + num(r.at("a")) + "," + num(par.at("theta")) + "," +
           num(p.at("point").at("multiple")) + "," + num(p.at("point").at("ell_over_rho")) + "," +
           num(par.at("rho")) + "," + num(par.at("epsilon")) + "," + num(par.at("ell")) + "," + num(par.at("L")) +
           "," + num(par.value("tau", nlohmann::json())) + "," + num(r.at("criterion").at("lhs")) + "," +
           num(r.at("criterion").at("rhs")) + "," + num(c.value("A0", nlohmann::json())) + "," +
           num(c.value("B0", nlohmann::json())) + "," + num(c.value("C0_prime", nlohmann::json())) + "," +
           num(c.value("L_star", nlohmann::json())) + "," + num(r.at("analytic_gap")) + "," +
           (r.at("numeric").is_object() ? num(r.at("numeric").at("numeric_gap")) : std::string()) + "," +
           r.at("verdict").get<std::string>() + "\n";
  }
  return out;
}

// ------------------------------------------------------------ runner

struct RunOutcome {
  int exit_code = exit_ok;
  nlohmann::json report;
  std::filesystem::path report_path;
};

namespace detail {

inline nlohmann::json provenance(const RunConfig& c) {
  return {{"schema", report_schema_version()},
          {"mode", c.mode},
          {"seed", c.seed},
          {"config", c.resolved},
          {"versions",
           {{"trapcert", kLibraryVersion},
            {"compiler", __VERSION__},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"boost", BOOST_LIB_VERSION},
            {"fftw", std::string(fftw_version)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
}

inline std::string u1_table(const CrossSectionEigenpair& p) {
  std::string s = "n,u1\n";
  for (std::size_t i = 0; i < p.grid.size(); ++i) s += fmt(p.grid[i]) + "," + fmt(p.u1[i]) + "\n";
  return s;
}

inline nlohmann::json field_summary(const ExtensionField& f, const CrossSectionEigenpair& pair) {
  const FieldInvariants inv = check_field(f);
  const DecayDiagnostics d = decay_diagnostics(f);
  return {{"lambda1", pair.lambda1},
          {"grid", {{"n_points", f.n_grid.size()}, {"y_points", f.y_grid.size()}}},
          {"invariants",
           {{"max_value", inv.max_value},
            {"min_value", inv.min_value},
            {"trace_error", inv.trace_error},
            {"trace_tol", inv.trace_tol},
            {"ok", inv.ok}}},
          {"decay",
           {{"slope", d.slope},
            {"slope_y", {d.slope_y_lo, d.slope_y_hi}},
            {"log_fit", {{"c1", d.log_fit_c1}, {"c2", d.log_fit_c2}, {"r2", d.log_fit_r2}}},
            {"y", d.y},
            {"norm_sq", d.norm_sq}}}};
}

inline CertificateReport certify_point(const RunConfig& c, const ProfileShape& shape, const SearchOptions& so,
                                       ExtensionCache& cache) {
  return select_parameters(shape, c.alpha, c.a, c.theta, so, &cache);
}

}  // namespace detail

/**
 * Runs one configuration, writes report.<mode>.json and tables under
 * `out`, returns the exit code and the report. Library errors are embedded
 * in the report; configuration errors propagate to the caller.
 */
inline RunOutcome run(const RunConfig& c, const std::filesystem::path& out, const DiskCache& disk) {
  namespace fs = std::filesystem;
  RunOutcome r;
  r.report = detail::provenance(c);
  r.report_path = out / ("report." + c.mode + ".json");
  fs::create_directories(out);
  ExtensionCache cache;
  auto preload = [&]() { return cache.preload(disk.eigenpair(c.alpha, c.a, c.resolution)); };
  try {
    if (c.mode == "cross-section") {
      const auto ev = preload();
      const auto& pair = ev->pair();
      const auto col = solve_cross_section_collocation(c.alpha, c.a);
      r.report["result"] = {{"eigenpair", to_json(pair)},
                            {"collocation", {{"lambda1", col.lambda1}, {"error_estimate", col.error_estimate}}},
                            {"residual", eigen_residual(pair)}};
      detail::write_atomic(out / "plotdata" / "u1.csv", detail::u1_table(pair));
    } else if (c.mode == "extend") {
      const auto ev = preload();
      const auto f = cache.field(ev, c.rho, c.tau);
      r.report["result"] = detail::field_summary(*f, ev->pair());
      detail::write_atomic(out / "plotdata" / "field.csv", field_table_csv(*f, c.plot_stride));
    } else if (c.mode == "certify") {
      const auto ev = preload();
      CertificateReport rep;
      if (c.fixed) {
        const CurvatureProfile prof =
            c.shape == "zero" ? CurvatureProfile::zero(c.fixed->ell)
                              : CurvatureProfile::scaled(shapes::by_id(c.shape, c.omega), c.fixed->epsilon, c.fixed->ell);
        EvaluateOptions eo;
        eo.direct = c.direct;
        rep = evaluate_configuration(prof, CutoffProfile::by_id(c.cutoff), *c.fixed, ev, &cache, eo);
      } else {
        rep = detail::certify_point(c, shapes::by_id(c.shape, c.omega), c.search, cache);
      }
      r.report["result"] = to_json(rep);
      if (rep.verdict != Verdict::certified) r.exit_code = exit_not_certified;
    } else if (c.mode == "spectrum") {
      const auto pair = disk.eigenpair(c.alpha, c.a, c.resolution);
      const TubularGeometry geom =
          bend_with_turning(shapes::by_id(c.bend_shape, c.omega), c.a, c.bend_epsilon, c.bend_turning, c.bend_rho);
      const OracleStudy st = run_oracle_study(geom, pair, c.h, c.s_extent, c.padding, c.eig_tol, c.max_iter);
      r.report["result"] = to_json(st);
      RasterOptions ro;
      ro.padding = c.padding;
      ro.s_extent = c.s_extent;
      detail::write_atomic(out / "plotdata" / "mask.pbm", rasterize_waveguide(geom, c.a, c.h, ro).to_pbm());
      std::string tab = "guide,h,lambda_min,residual,threshold,verdict\n";
      for (std::size_t i = 0; i < st.h.size(); ++i) {
        for (const auto* runs : {&st.straight, &st.bent}) {
          const SpectrumResult& s = (*runs)[i];
          tab += std::string(runs == &st.straight ? "straight" : "bent") + "," + detail::fmt(s.h) + "," +
                 detail::fmt(s.values[0]) + "," + detail::fmt(s.residuals[0]) + "," + detail::fmt(s.threshold) +
                 "," + to_string(s.verdict) + "\n";
        }
      }
      detail::write_atomic(out / "plotdata" / "spectrum.csv", tab);
      if (st.bent_verdict != OracleVerdict::bound_state_found ||
          st.straight_verdict != OracleVerdict::none_below_threshold)
        r.exit_code = exit_not_certified;
    } else if (c.mode == "sweep") {
      const auto ev = preload();
      (void)ev;
      const ProfileShape shape = shapes::by_id(c.shape, c.omega);
      const double thr = shapes::by_id(c.reference_shape, c.omega).ell_over_rho_threshold(c.theta);
      const std::string run_key = detail::hex64(detail::fnv1a(c.resolved.dump()));
      const std::size_t npts = c.multiples.size();
      std::vector<nlohmann::json> points(npts);
      std::vector<std::string> errors(npts);
      std::atomic<std::size_t> next{0};
      auto worker = [&]() {
        for (std::size_t i; (i = next.fetch_add(1)) < npts;) {
          const fs::path pf = out / "points" / ("point_" + std::to_string(i) + ".json");
          try {
            if (fs::exists(pf)) {
              auto j = nlohmann::json::parse(detail::read_file(pf));
              if (j.value("schema", std::string("none")) != report_schema_version())
                throw InputError("stale point report " + pf.string() + " has schema '" +
                                 j.value("schema", std::string("none")) + "'; expected '" +
                                 report_schema_version() + "'");
              if (j.value("run_key", std::string()) == run_key) {
                points[i] = std::move(j);
                continue;
              }
            }
            SearchOptions so = c.search;
            so.ell_over_rho = c.multiples[i] * thr;
            const CertificateReport rep = detail::certify_point(c, shape, so, cache);
            nlohmann::json j{{"schema", report_schema_version()},
                             {"run_key", run_key},
                             {"point", {{"index", int(i)}, {"multiple", c.multiples[i]}, {"ell_over_rho", *so.ell_over_rho}}},
                             {"result", to_json(rep)}};
            detail::write_atomic(pf, j.dump(1));
            points[i] = std::move(j);
          } catch (const std::exception& e) {
            errors[i] = e.what();
          }
        }
      };
      std::vector<std::thread> pool;
      for (int t = 0; t < std::min<int>(c.jobs, int(npts)); ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
      for (std::size_t i = 0; i < npts; ++i)
        if (!errors[i].empty()) throw InputError("sweep point " + std::to_string(i) + ": " + errors[i]);
      const std::string csv = aggregate_sweep(points);
      detail::write_atomic(out / "sweep.csv", csv);
      std::string gap = "multiple,ell_over_rho,analytic_gap,numeric_gap,verdict\n";
      nlohmann::json summary = nlohmann::json::array();
      for (const auto& p : points) {
        const auto& res = p.at("result");
        gap += detail::fmt(p["point"]["multiple"].get<double>()) + "," +
               detail::fmt(p["point"]["ell_over_rho"].get<double>()) + "," +
               detail::fmt(res["analytic_gap"].get<double>()) + "," +
               (res["numeric"].is_object() ? detail::fmt(res["numeric"]["numeric_gap"].get<double>()) : "") + "," +
               res["verdict"].get<std::string>() + "\n";
        summary.push_back({{"multiple", p["point"]["multiple"]},
                           {"ell_over_rho", p["point"]["ell_over_rho"]},
                           {"verdict", res["verdict"]},
                           {"analytic_gap", res["analytic_gap"]}});
      }
      detail::write_atomic(out / "plotdata" / "gap_vs_ell_over_rho.csv", gap);
      r.report["result"] = {{"threshold_ell_over_rho", thr}, {"reference_shape", c.reference_shape}, {"points", summary}};
      bool any = false;
      for (const auto& p : points) any = any || p["result"]["verdict"] == "certified";
      if (!any) r.exit_code = exit_not_certified;
    } else if (c.mode == "verify-identities") {
      const auto checks = identity_suite(c.seed, c.resolution);
      nlohmann::json arr = nlohmann::json::array();
      bool all = true;
      for (const auto& k : checks) {
        arr.push_back(to_json(k));
        all = all && k.pass;
      }
      r.report["result"] = {{"checks", arr}, {"all_pass", all}};
      if (!all) r.exit_code = exit_numerical;
    }
    r.report["status"] = r.exit_code == exit_ok ? "ok" : "not_certified";
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    r.exit_code = e.kind() == ErrorKind::input ? exit_config : exit_numerical;
    r.report["status"] = "error";
    r.report["error"] = {{"kind", to_string(e.kind())}, {"message", e.what()}, {"value", e.value()}};
  }
  if (r.exit_code == exit_numerical && !r.report.contains("error") && c.mode == "verify-identities")
    r.report["status"] = "identities_failed";
  detail::write_atomic(r.report_path, r.report.dump(2) + "\n");
  return r;
}

/** Reads a report and checks its schema. */
inline nlohmann::json load_report(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  const std::string schema = j.value("schema", std::string("none"));
  if (schema != report_schema_version())
    throw InputError("report schema '" + schema + "' is not supported; expected '" + report_schema_version() + "'");
  return j;
}

}  // namespace trapcert
