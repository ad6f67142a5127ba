#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metafit/error.hpp"
#include "metafit/gaussian.hpp"

namespace metafit {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Upper quantile z with P(|Z| > z) = 1 - level.
inline double normal_two_sided_quantile(double level) { return std::sqrt(chisq1_quantile(level)); }

struct CoefficientRow {
  std::string name;
  double estimate = 0, se = 0, z = 0, p = 1, wald_lo = 0, wald_hi = 0;
};

struct ComponentRow {
  std::string name;
  double variance = 0, sd = 0;
  bool boundary = false;
};

struct Summary {
  double level = 0.95;
  std::vector<CoefficientRow> fixed;
  std::vector<CoefficientRow> dispersion;  // log-SD scale
  std::vector<ComponentRow> components;
  std::vector<Correlation> correlations;
  std::optional<double> residual_sd;
  double loglik = 0, aic = 0, bic = 0;
  int n_parameters = 0;
  long n = 0;
  std::map<std::string, int> k_groups;
  bool converged = false;
  bool reml = false;
  int n_iter = 0;
  double grad_norm = 0;
  std::string message;
  std::vector<std::string> warnings;
};

inline CoefficientRow coefficient_row(std::string name, double est, double se, double zcrit) {
  CoefficientRow r;
  r.name = std::move(name);
  r.estimate = est;
  r.se = se;
  r.z = se > 0 ? est / se : std::numeric_limits<double>::quiet_NaN();
  r.p = std::isfinite(r.z) ? std::erfc(std::abs(r.z) / std::sqrt(2.0)) : std::numeric_limits<double>::quiet_NaN();
  r.wald_lo = est - zcrit * se;
  r.wald_hi = est + zcrit * se;
  return r;
}

// Wald tables, variance components and information criteria. A fit that did
// not converge is rejected unless `allow_unconverged` is set.
inline Summary summarize(const FitResult& f, double level = 0.95, bool allow_unconverged = false) {
  if (!f.converged && !allow_unconverged)
    throw FitError("fit did not converge (" + f.message + ", gradient norm " + std::to_string(f.grad_norm) +
                   ", " + std::to_string(f.n_iter) + " iterations)");
  if (!(level > 0 && level < 1)) throw InputError("confidence level must lie in (0, 1)");
  Summary s;
  s.level = level;
  const double zc = normal_two_sided_quantile(level);
  for (Eigen::Index j = 0; j < f.beta.size(); ++j) {
    const double v = f.beta_cov.size() ? f.beta_cov(j, j) : std::numeric_limits<double>::quiet_NaN();
    s.fixed.push_back(coefficient_row(f.beta_names[static_cast<std::size_t>(j)], f.beta(j), std::sqrt(v), zc));
  }
  const Eigen::Index nd = f.delta.size();
  const Eigen::Index off = f.params.size() - nd;
  for (Eigen::Index j = 0; j < nd; ++j) {
    const double v = f.param_cov(off + j, off + j);
    s.dispersion.push_back(coefficient_row(f.delta_names[static_cast<std::size_t>(j)], f.delta(j), std::sqrt(v), zc));
  }
  for (const auto& c : f.variance_components) {
    const double var = c.boundary ? 0.0 : c.variance;
    s.components.push_back({c.name, var, std::sqrt(var), c.boundary});
  }
  s.correlations = f.correlations;
  s.residual_sd = f.residual_sd;
  s.loglik = f.loglik;
  s.n_parameters = f.n_parameters();
  s.aic = 2.0 * s.n_parameters - 2.0 * f.loglik;
  s.bic = std::log(static_cast<double>(f.n_obs)) * s.n_parameters - 2.0 * f.loglik;
  s.n = f.n_obs;
  s.k_groups = f.n_groups;
  s.converged = f.converged;
  s.reml = f.reml;
  s.n_iter = f.n_iter;
  s.grad_norm = f.grad_norm;
  s.message = f.message;
  s.warnings = f.warnings;
  return s;
}

struct PhyloSignal {
  double lambda = 0;
  bool defined = true;  // false when both components are zero
};

// Share of the species-level variance carried by the phylogenetic component.
inline PhyloSignal phylo_signal(const FitResult& f, const std::string& phylo_name, const std::string& species_name) {
  const auto* ph = f.component(phylo_name);
  const auto* sp = f.component(species_name);
  if (!ph) throw InputError("no variance component named '" + phylo_name + "'");
  if (!sp) throw InputError("no variance component named '" + species_name + "'");
  const double a = ph->boundary ? 0.0 : ph->variance;
  const double b = sp->boundary ? 0.0 : sp->variance;
  if (a + b <= 0) return {0.0, false};
  return {a / (a + b), true};
}

inline PhyloSignal phylo_signal(double phylo_variance, double species_variance) {
  if (phylo_variance + species_variance <= 0) return {0.0, false};
  return {phylo_variance / (phylo_variance + species_variance), true};
}

struct Proportion {
  double estimate = 0, lo = 0, hi = 0;
};

inline double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Logit-scale estimate mapped to a proportion; the interval is the logit Wald
// interval transformed endpoint by endpoint.
inline Proportion back_transform_logit(double estimate, double se, double level = 0.95) {
  const double z = normal_two_sided_quantile(level);
  return {logistic(estimate), logistic(estimate - z * se), logistic(estimate + z * se)};
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

// Rounds to `digits` significant digits; digits <= 0 keeps full precision.
inline double round_significant(double x, int digits) {
  if (digits <= 0 || !std::isfinite(x) || x == 0.0) return x;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json json_number(double x, int digits) {
  if (!std::isfinite(x)) return nullptr;
  return round_significant(x, digits);
}

// Canonical form: object keys sorted, numbers rounded to `digits` significant
// digits (full precision when digits <= 0), non-finite numbers as null.
inline nlohmann::json to_json(const Summary& s, int digits = 6) {
  using nlohmann::json;
  auto num = [digits](double x) { return json_number(x, digits); };
  auto coef = [&](const std::vector<CoefficientRow>& rows) {
    json a = json::array();
    for (const auto& r : rows)
      a.push_back({{"name", r.name},
                   {"estimate", num(r.estimate)},
                   {"se", num(r.se)},
                   {"z", num(r.z)},
                   {"p", num(r.p)},
                   {"wald_lo", num(r.wald_lo)},
                   {"wald_hi", num(r.wald_hi)}});
    return a;
  };
  json j;
  j["level"] = num(s.level);
  j["fixed_effects"] = coef(s.fixed);
  j["dispersion"] = coef(s.dispersion);
  json comps = json::array();
  for (const auto& c : s.components)
    comps.push_back({{"name", c.name}, {"variance", num(c.variance)}, {"sd", num(c.sd)}, {"boundary", c.boundary}});
  j["variance_components"] = comps;
  json cors = json::array();
  for (const auto& c : s.correlations) cors.push_back({{"name", c.name}, {"value", num(c.value)}});
  j["correlations"] = cors;
  j["residual_sd"] = s.residual_sd ? num(*s.residual_sd) : json(nullptr);
  j["loglik"] = num(s.loglik);
  j["aic"] = num(s.aic);
  j["bic"] = num(s.bic);
  j["n_parameters"] = s.n_parameters;
  j["n"] = s.n;
  j["k_groups"] = s.k_groups;
  j["converged"] = s.converged;
  j["reml"] = s.reml;
  j["n_iter"] = s.n_iter;
  j["grad_norm"] = num(s.grad_norm);
  j["message"] = s.message;
  j["warnings"] = s.warnings;
  return j;
}

inline std::string to_json_string(const Summary& s, bool exact = false) {
  return to_json(s, exact ? 0 : 6).dump(2) + "\n";
}

}  // namespace metafit
