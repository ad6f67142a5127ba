#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/tools/minima.hpp>
#include <json.hpp>

#include "metafit/csv.hpp"
#include "metafit/data.hpp"
#include "metafit/formula.hpp"
#include "metafit/gaussian.hpp"
#include "metafit/glmm.hpp"
#include "metafit/inference.hpp"
#include "metafit/rng.hpp"

namespace metafit::sim {

// Two-stage Normal-Normal, one-stage Binomial-Normal, one-stage Poisson-Normal.
enum class Model { NN, BN, PN };

inline const char* to_string(Model m) {
  switch (m) {
    case Model::NN: return "NN";
    case Model::BN: return "BN";
    case Model::PN: return "PN";
  }
  return "?";
}

inline Model parse_model(const std::string& s) {
  if (s == "NN") return Model::NN;
  if (s == "BN") return Model::BN;
  if (s == "PN") return Model::PN;
  throw InputError("unknown model '" + s + "' (expected NN, BN or PN)");
}

// One-stage models only apply to the count measure they describe.
inline bool applies(Model m, Measure ms) {
  switch (m) {
    case Model::NN: return true;
    case Model::BN: return ms == Measure::lnOR;
    case Model::PN: return ms == Measure::lnIRR;
  }
  return false;
}

// Moderate true effect used by the default grid, per measure.
inline double moderate_mu(Measure m) {
  switch (m) {
    case Measure::SMD: return 0.5;
    case Measure::lnRR: return 0.2;
    case Measure::lnOR: return std::log(2.0);
    case Measure::lnIRR: return std::log(1.5);
  }
  return 0.0;
}

struct SimConfig {
  Measure measure = Measure::SMD;
  int k = 10;
  double mu = 0.0;
  double tau2 = 0.0;
  int n_min = 20;  // per-arm sample size ~ U{n_min..n_max}
  int n_max = 100;
  double control_mean = 0.0;  // SMD
  double control_sd = 1.0;    // SMD
  double rr_mean = 10.0;      // lnRR control mean
  double rr_sd = 3.0;         // lnRR control SD; the treatment arm keeps the same CV
  double control_risk = 0.1;  // lnOR
  double control_rate = 0.2;  // lnIRR events per unit person-time
  double time_per_subject = 1.0;
  int n_reps = 1000;
  std::uint64_t seed = 1;
  std::vector<Model> models{Model::NN};
  double level = 0.95;

  void validate() const {
    if (k < 2) throw InputError("k must be at least 2");
    if (!(tau2 >= 0) || !std::isfinite(tau2)) throw InputError("tau2 must be finite and non-negative");
    if (!std::isfinite(mu)) throw InputError("mu must be finite");
    if (n_reps < 1) throw InputError("reps must be at least 1");
    if (n_min < 2 || n_max < n_min) throw InputError("need 2 <= n_min <= n_max");
    if (!(control_risk > 0 && control_risk < 1)) throw InputError("control_risk must lie in (0, 1)");
    if (!(control_rate > 0) || !(time_per_subject > 0)) throw InputError("control_rate and time_per_subject must be positive");
    if (!(control_sd > 0) || !(rr_sd > 0)) throw InputError("arm SDs must be positive");
    if (!(rr_mean > 0)) throw InputError("rr_mean must be positive");
    if (!(level > 0 && level < 1)) throw InputError("level must lie in (0, 1)");
  }
};

struct Dataset {
  EffectSizeTable table;              // yi, vi, study, id, g
  std::optional<ArmTable> arms;       // lnOR / lnIRR
  std::vector<double> theta;          // true study effects
  int redraws = 0;                    // lnRR draws with a non-positive sample mean
  int corrections = 0;                // studies that needed the 0.5 continuity correction
};

// Replicate `rep` of configuration `cfg`. The stream depends only on (seed, stream_id, rep).
inline Dataset generate(const SimConfig& cfg, int rep, std::uint64_t stream_id = 0) {
  cfg.validate();
  Philox4x32 eng(cfg.seed, (stream_id << 32) | static_cast<std::uint32_t>(rep));
  std::normal_distribution<double> N01(0.0, 1.0);
  std::uniform_int_distribution<int> nd(cfg.n_min, cfg.n_max);
  const double tau = std::sqrt(cfg.tau2);

  Dataset ds;
  std::vector<StudyArms> studies;
  ArmTable arms;
  EscalcOptions eo;
  eo.continuity_correction = true;

  for (int i = 0; i < cfg.k; ++i) {
    const double th = cfg.mu + tau * N01(eng);
    ds.theta.push_back(th);
    const double n1 = nd(eng), n2 = nd(eng);
    StudyArms s;
    s.study = std::to_string(i + 1);
    s.treatment.n = n1;
    s.control.n = n2;
    auto sample_sd = [&](double sd, double n) {
      std::chi_squared_distribution<double> chi(n - 1);
      return sd * std::sqrt(chi(eng) / (n - 1));
    };
    switch (cfg.measure) {
      case Measure::SMD: {
        const double m2 = cfg.control_mean, m1 = cfg.control_mean + th * cfg.control_sd;
        s.treatment.mean = m1 + cfg.control_sd / std::sqrt(n1) * N01(eng);
        s.control.mean = m2 + cfg.control_sd / std::sqrt(n2) * N01(eng);
        s.treatment.sd = sample_sd(cfg.control_sd, n1);
        s.control.sd = sample_sd(cfg.control_sd, n2);
        break;
      }
      case Measure::lnRR: {
        const double m2 = cfg.rr_mean, m1 = cfg.rr_mean * std::exp(th);
        const double sd2 = cfg.rr_sd, sd1 = cfg.rr_sd * std::exp(th);
        for (int attempt = 0;; ++attempt) {
          if (attempt == 1000) throw FitError("lnRR generator keeps drawing non-positive means");
          s.treatment.mean = m1 + sd1 / std::sqrt(n1) * N01(eng);
          s.control.mean = m2 + sd2 / std::sqrt(n2) * N01(eng);
          s.treatment.sd = sample_sd(sd1, n1);
          s.control.sd = sample_sd(sd2, n2);
          if (s.treatment.mean > 0 && s.control.mean > 0) break;
          ++ds.redraws;
        }
        break;
      }
      case Measure::lnOR: {
        const double odds_c = cfg.control_risk / (1 - cfg.control_risk);
        const double odds_t = odds_c * std::exp(th);
        const double p_t = odds_t / (1 + odds_t);
        std::binomial_distribution<long> bt(static_cast<long>(n1), p_t), bc(static_cast<long>(n2), cfg.control_risk);
        s.treatment.events = static_cast<double>(bt(eng));
        s.control.events = static_cast<double>(bc(eng));
        s.treatment.exposure = n1;
        s.control.exposure = n2;
        arms.studies.push_back({s.study, s.treatment.events, n1, s.control.events, n2});
        break;
      }
      case Measure::lnIRR: {
        const double t1 = n1 * cfg.time_per_subject, t2 = n2 * cfg.time_per_subject;
        std::poisson_distribution<long> pt(cfg.control_rate * std::exp(th) * t1), pc(cfg.control_rate * t2);
        s.treatment.events = static_cast<double>(pt(eng));
        s.control.events = static_cast<double>(pc(eng));
        s.treatment.exposure = t1;
        s.control.exposure = t2;
        arms.studies.push_back({s.study, s.treatment.events, t1, s.control.events, t2});
        break;
      }
    }
    studies.push_back(s);
  }

  std::vector<std::string> obs, cl;
  std::vector<double> y, v;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const EffectSize e = compute_effect(cfg.measure, studies[i], eo);
    ds.corrections += e.corrected ? 1 : 0;
    obs.push_back(std::to_string(i + 1));
    cl.push_back(studies[i].study);
    y.push_back(e.y);
    v.push_back(e.v);
  }
  std::map<std::string, Column> cols;
  cols.emplace("g", Column::from_text(std::vector<std::string>(studies.size(), "1")));
  ds.table = EffectSizeTable(std::move(obs), std::move(cl), std::move(y), std::move(v), std::move(cols),
                             ColumnMap{"yi", "vi", "study", "id"});
  if (cfg.measure == Measure::lnOR || cfg.measure == Measure::lnIRR) ds.arms = std::move(arms);
  return ds;
}

// ---------------------------------------------------------------------------
// Independent univariate REML estimator used as the agreement reference
// ---------------------------------------------------------------------------

struct ReferenceEstimate {
  double mu = 0, se = 0, tau2 = 0;
};

// Restricted log-likelihood (up to a constant) of the random-effects model at tau2.
inline double reml_criterion(const std::vector<double>& y, const std::vector<double>& v, double tau2) {
  double sw = 0, swy = 0, logdet = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = 1.0 / (v[i] + tau2);
    sw += w;
    swy += w * y[i];
    logdet += std::log(v[i] + tau2);
  }
  const double mu = swy / sw;
  double q = 0;
  for (std::size_t i = 0; i < y.size(); ++i) q += (y[i] - mu) * (y[i] - mu) / (v[i] + tau2);
  return 0.5 * (logdet + std::log(sw) + q);
}

// Brent minimization of the criterion over tau2 in [0, upper].
inline ReferenceEstimate reference_reml(const std::vector<double>& y, const std::vector<double>& v) {
  const double n = static_cast<double>(y.size());
  double mean = 0;
  for (double x : y) mean += x;
  mean /= n;
  double var = 0;
  for (double x : y) var += (x - mean) * (x - mean);
  var /= (n - 1);
  const double vmax = *std::max_element(v.begin(), v.end());
  const double upper = std::max({1.0, 10.0 * var, 10.0 * vmax});
  auto f = [&](double t) { return reml_criterion(y, v, t); };
  boost::uintmax_t iters = 500;
  auto r = boost::math::tools::brent_find_minima(f, 0.0, upper, 52, iters);
  double tau2 = r.first;
  // Brent never evaluates the endpoint itself.
  if (f(0.0) <= r.second) tau2 = 0.0;
  ReferenceEstimate out;
  out.tau2 = tau2;
  double sw = 0, swy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sw += 1.0 / (v[i] + tau2);
    swy += y[i] / (v[i] + tau2);
  }
  out.mu = swy / sw;
  out.se = 1.0 / std::sqrt(sw);
  return out;
}

// ---------------------------------------------------------------------------
// Fitting one replicate
// ---------------------------------------------------------------------------

struct ModelFit {
  Model model = Model::NN;
  bool converged = false;
  double mu = 0, se = 0, tau2 = 0;
  double seconds = 0;  // wall time; kept out of every metric
  std::string error;
};

struct RepResult {
  int rep = 0;
  std::vector<ModelFit> fits;
  std::optional<ReferenceEstimate> reference;  // present when NN was fitted
  int redraws = 0;
  int corrections = 0;
};

inline const ModelSpec& nn_spec() {
  static const ModelSpec spec = [] {
    ModelSpec s = parse_formula("yi ~ 1 + (1|study) + equalto(0 + id|g, V)");
    s.disp = parse_dispformula("~0");
    s.reml = true;
    return s;
  }();
  return spec;
}

inline ModelFit fit_model(Model m, const Dataset& ds) {
  ModelFit out;
  out.model = m;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (m == Model::NN) {
      std::map<std::string, SamplingCovariance> mats{{"V", diag_vcv(ds.table)}};
      GaussianModel gm(build_design(nn_spec(), ds.table, mats), true);
      FitResult f = fit(gm);
      out.converged = f.converged;
      out.mu = f.beta(0);
      out.se = std::sqrt(f.beta_cov(0, 0));
      out.tau2 = std::exp(2.0 * f.theta[0](0));
    } else {
      OneStageModel om;
      om.family = m == Model::BN ? Family::binomial : Family::poisson;
      om.data = *ds.arms;
      FitResult f = fit_onestage(om);
      const Eigen::Index j = f.beta.size() - 1;
      out.converged = f.converged && std::isfinite(f.beta_cov(j, j));
      out.mu = f.beta(j);
      out.se = std::sqrt(f.beta_cov(j, j));
      out.tau2 = std::exp(2.0 * f.params(f.params.size() - 1));
    }
  } catch (const std::exception& e) {
    out.converged = false;
    out.error = e.what();
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline RepResult run_rep(const SimConfig& cfg, int rep, std::uint64_t stream_id = 0) {
  RepResult r;
  r.rep = rep;
  Dataset ds = generate(cfg, rep, stream_id);
  r.redraws = ds.redraws;
  r.corrections = ds.corrections;
  for (Model m : cfg.models) {
    if (!applies(m, cfg.measure)) continue;
    r.fits.push_back(fit_model(m, ds));
    if (m == Model::NN) r.reference = reference_reml(ds.table.y(), ds.table.v());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct Agreement {
  int compared = 0;
  int agreeing = 0;  // |dmu| <= 1e-6 and |dtau2| <= 1e-5
  double max_dmu = 0;
  double max_dtau2 = 0;
};

struct MetricsRow {
  Measure measure = Measure::SMD;
  int k = 0;
  double mu = 0, tau2 = 0;
  Model model = Model::NN;
  int reps = 0;
  int converged = 0;
  double convergence_rate = 0;
  int used = 0;  // replicates where every requested model converged
  double bias = 0, bias_mcse = 0, rmse = 0, coverage = 0, ci_width = 0;
  double rejection_rate = 0;  // type I error when mu == 0, power otherwise
  double mean_tau2 = 0;
  int redraws = 0, corrections = 0;
  std::optional<Agreement> agreement;

  const char* rejection_kind() const { return mu == 0.0 ? "type1" : "power"; }
};

struct TimingRow {
  Measure measure;
  int k;
  double mu, tau2;
  Model model;
  double mean_seconds;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<TimingRow> timing;
  std::vector<std::pair<SimConfig, std::vector<RepResult>>> raw;  // kept when requested
};

namespace detail {

// Sum of values in sorted order, so the total does not depend on replicate order.
inline double ordered_sum(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  double s = 0;
  for (double x : xs) s += x;
  return s;
}

}  // namespace detail

inline std::vector<MetricsRow> aggregate(const SimConfig& cfg, const std::vector<RepResult>& reps,
                                         std::vector<TimingRow>* timing = nullptr) {
  std::vector<MetricsRow> rows;
  const double z = normal_two_sided_quantile(cfg.level);
  std::vector<Model> models;
  for (Model m : cfg.models)
    if (applies(m, cfg.measure) && std::find(models.begin(), models.end(), m) == models.end()) models.push_back(m);
  if (models.empty()) return rows;

  auto all_converged = [](const RepResult& r) {
    return std::all_of(r.fits.begin(), r.fits.end(), [](const ModelFit& f) { return f.converged; });
  };
  int redraws = 0, corrections = 0;
  for (const auto& r : reps) {
    redraws += r.redraws;
    corrections += r.corrections;
  }
  for (Model m : models) {
    MetricsRow row;
    row.measure = cfg.measure;
    row.k = cfg.k;
    row.mu = cfg.mu;
    row.tau2 = cfg.tau2;
    row.model = m;
    row.reps = static_cast<int>(reps.size());
    row.redraws = redraws;
    row.corrections = corrections;
    std::vector<double> err, sq, cover, width, reject, tau2s, secs;
    Agreement ag;
    for (const auto& r : reps) {
      auto it = std::find_if(r.fits.begin(), r.fits.end(), [m](const ModelFit& f) { return f.model == m; });
      if (it == r.fits.end()) continue;
      secs.push_back(it->seconds);
      if (it->converged) ++row.converged;
      if (!all_converged(r)) continue;
      ++row.used;
      const double e = it->mu - cfg.mu;
      err.push_back(e);
      sq.push_back(e * e);
      cover.push_back(std::abs(e) <= z * it->se ? 1.0 : 0.0);
      width.push_back(2 * z * it->se);
      reject.push_back(std::abs(it->mu) > z * it->se ? 1.0 : 0.0);
      tau2s.push_back(it->tau2);
      if (m == Model::NN && r.reference) {
        const double dmu = std::abs(it->mu - r.reference->mu);
        const double dt = std::abs(it->tau2 - r.reference->tau2);
        ++ag.compared;
        if (dmu <= 1e-6 && dt <= 1e-5) ++ag.agreeing;
        ag.max_dmu = std::max(ag.max_dmu, dmu);
        ag.max_dtau2 = std::max(ag.max_dtau2, dt);
      }
    }
    row.convergence_rate = row.reps ? static_cast<double>(row.converged) / row.reps : 0.0;
    const double n = row.used;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (row.used > 0) {
      row.bias = detail::ordered_sum(err) / n;
      std::vector<double> dev2;
      for (double e : err) dev2.push_back((e - row.bias) * (e - row.bias));
      row.bias_mcse = row.used > 1 ? std::sqrt(detail::ordered_sum(dev2) / (n - 1) / n) : nan;
      row.rmse = std::sqrt(detail::ordered_sum(sq) / n);
      row.coverage = detail::ordered_sum(cover) / n;
      row.ci_width = detail::ordered_sum(width) / n;
      row.rejection_rate = detail::ordered_sum(reject) / n;
      row.mean_tau2 = detail::ordered_sum(tau2s) / n;
    } else {
      row.bias = row.bias_mcse = row.rmse = row.coverage = row.ci_width = row.rejection_rate = row.mean_tau2 = nan;
    }
    if (m == Model::NN) row.agreement = ag;
    if (timing)
      timing->push_back({cfg.measure, cfg.k, cfg.mu, cfg.tau2, m,
                         secs.empty() ? 0.0 : detail::ordered_sum(secs) / static_cast<double>(secs.size())});
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Grids and the parallel runner
// ---------------------------------------------------------------------------

struct SimGrid {
  std::vector<Measure> measures{Measure::SMD, Measure::lnRR, Measure::lnOR, Measure::lnIRR};
  std::vector<int> ks{10, 30};
  std::vector<double> tau2s{0.0, 0.1, 0.3};
  std::vector<double> mus;  // empty: {0, moderate_mu(measure)} per measure
  SimConfig base;           // everything else
};

// Default grid. These values are artifact defaults chosen for this tool, not
// a reproduction of any published parameter table.
inline SimGrid default_grid() {
  SimGrid g;
  g.base.models = {Model::NN, Model::BN, Model::PN};
  return g;
}

inline std::vector<SimConfig> expand(const SimGrid& g) {
  std::vector<SimConfig> out;
  for (Measure m : g.measures) {
    std::vector<double> mus = g.mus.empty() ? std::vector<double>{0.0, moderate_mu(m)} : g.mus;
    for (int k : g.ks)
      for (double t : g.tau2s)
        for (double mu : mus) {
          SimConfig c = g.base;
          c.measure = m;
          c.k = k;
          c.tau2 = t;
          c.mu = mu;
          c.validate();
          out.push_back(c);
        }
  }
  return out;
}

inline int default_threads() {
  if (const char* e = std::getenv("METAFIT_THREADS")) {
    try {
      const int n = std::stoi(e);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs every (config, replicate) pair on a worker pool. Results are stored by
// index, so the report does not depend on the schedule.
inline MetricsReport run(const std::vector<SimConfig>& configs, int threads = 0, bool keep_raw = false) {
  for (const auto& c : configs) c.validate();
  if (threads <= 0) threads = default_threads();
  std::vector<std::vector<RepResult>> results(configs.size());
  std::vector<std::pair<std::size_t, int>> jobs;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    results[c].resize(static_cast<std::size_t>(configs[c].n_reps));
    for (int r = 0; r < configs[c].n_reps; ++r) jobs.emplace_back(c, r);
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::string first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      const auto [c, r] = jobs[j];
      try {
        results[c][static_cast<std::size_t>(r)] = run_rep(configs[c], r, c);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (first_error.empty()) first_error = e.what();
      }
    }
  };
  const int nt = std::min<int>(threads, static_cast<int>(std::max<std::size_t>(jobs.size(), 1)));
  std::vector<std::thread> pool;
  for (int t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (!first_error.empty()) throw FitError("simulation failed: " + first_error);

  MetricsReport rep;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    auto rows = aggregate(configs[c], results[c], &rep.timing);
    rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
    if (keep_raw) rep.raw.emplace_back(configs[c], std::move(results[c]));
  }
  return rep;
}

inline MetricsReport run(const SimConfig& cfg, int threads = 0, bool keep_raw = false) {
  return run(std::vector<SimConfig>{cfg}, threads, keep_raw);
}

// ---------------------------------------------------------------------------
// Config files and report writers
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ',')) {
    cur = csv::trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& s) {
  auto v = csv::to_double(s);
  if (!v || !std::isfinite(*v)) throw InputError("invalid value '" + s + "' for " + key);
  return *v;
}

inline long parse_int(const std::string& key, const std::string& s) {
  const double v = parse_real(key, s);
  if (v != std::floor(v)) throw InputError("invalid integer '" + s + "' for " + key);
  return static_cast<long>(v);
}

}  // namespace detail

// Applies one `key = value` setting; list-valued keys take comma-separated values.
inline void apply_setting(SimGrid& g, const std::string& key, const std::string& value) {
  using namespace detail;
  auto reals = [&] {
    std::vector<double> v;
    for (const auto& s : split_list(value)) v.push_back(parse_real(key, s));
    if (v.empty()) throw InputError("empty list for " + key);
    return v;
  };
  if (key == "measure" || key == "measures") {
    g.measures.clear();
    for (const auto& s : split_list(value)) g.measures.push_back(parse_measure(s));
    if (g.measures.empty()) throw InputError("empty list for " + key);
  } else if (key == "k") {
    g.ks.clear();
    for (const auto& s : split_list(value)) g.ks.push_back(static_cast<int>(parse_int(key, s)));
    if (g.ks.empty()) throw InputError("empty list for k");
  } else if (key == "tau2") {
    g.tau2s = reals();
  } else if (key == "mu") {
    g.mus = reals();
  } else if (key == "models") {
    g.base.models.clear();
    for (const auto& s : split_list(value)) g.base.models.push_back(parse_model(s));
  } else if (key == "reps") {
    g.base.n_reps = static_cast<int>(parse_int(key, value));
  } else if (key == "seed") {
    const long s = parse_int(key, value);
    if (s < 0) throw InputError("seed must be non-negative");
    g.base.seed = static_cast<std::uint64_t>(s);
  } else if (key == "n_min") {
    g.base.n_min = static_cast<int>(parse_int(key, value));
  } else if (key == "n_max") {
    g.base.n_max = static_cast<int>(parse_int(key, value));
  } else if (key == "control_mean") {
    g.base.control_mean = parse_real(key, value);
  } else if (key == "control_sd") {
    g.base.control_sd = parse_real(key, value);
  } else if (key == "rr_mean") {
    g.base.rr_mean = parse_real(key, value);
  } else if (key == "rr_sd") {
    g.base.rr_sd = parse_real(key, value);
  } else if (key == "control_risk") {
    g.base.control_risk = parse_real(key, value);
  } else if (key == "control_rate") {
    g.base.control_rate = parse_real(key, value);
  } else if (key == "time_per_subject") {
    g.base.time_per_subject = parse_real(key, value);
  } else if (key == "level") {
    g.base.level = parse_real(key, value);
  } else {
    throw InputError("unknown simulation setting '" + key + "'");
  }
}

// `key = value` lines; '#' starts a comment.
inline SimGrid parse_grid_config(std::istream& in, SimGrid g = default_grid(), const std::string& source = "<config>") {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = csv::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(source + ": line " + std::to_string(lineno) + " is not key = value");
    apply_setting(g, csv::trim(line.substr(0, eq)), csv::trim(line.substr(eq + 1)));
  }
  return g;
}

inline void write_csv(std::ostream& os, const MetricsReport& r) {
  using csv::format_number;
  os << "measure,k,mu,tau2,model,reps,converged,convergence_rate,used,bias,bias_mcse,rmse,coverage,ci_width,"
        "rejection_kind,rejection_rate,mean_tau2,redraws,corrections,agreement_compared,agreement_count,"
        "agreement_max_dmu,agreement_max_dtau2\n";
  for (const auto& m : r.rows) {
    os << to_string(m.measure) << ',' << m.k << ',' << format_number(m.mu) << ',' << format_number(m.tau2) << ','
       << to_string(m.model) << ',' << m.reps << ',' << m.converged << ',' << format_number(m.convergence_rate) << ','
       << m.used << ',' << format_number(m.bias) << ',' << format_number(m.bias_mcse) << ','
       << format_number(m.rmse) << ',' << format_number(m.coverage) << ',' << format_number(m.ci_width) << ','
       << m.rejection_kind() << ',' << format_number(m.rejection_rate) << ',' << format_number(m.mean_tau2) << ','
       << m.redraws << ',' << m.corrections << ',';
    if (m.agreement)
      os << m.agreement->compared << ',' << m.agreement->agreeing << ',' << format_number(m.agreement->max_dmu)
         << ',' << format_number(m.agreement->max_dtau2);
    else
      os << ",,,";
    os << '\n';
  }
}

inline nlohmann::json to_json(const MetricsReport& r) {
  using nlohmann::json;
  auto num = [](double x) { return json_number(x, 10); };
  json rows = json::array();
  for (const auto& m : r.rows) {
    json j{{"measure", to_string(m.measure)},
           {"k", m.k},
           {"mu", num(m.mu)},
           {"tau2", num(m.tau2)},
           {"model", to_string(m.model)},
           {"reps", m.reps},
           {"converged", m.converged},
           {"convergence_rate", num(m.convergence_rate)},
           {"used", m.used},
           {"bias", num(m.bias)},
           {"bias_mcse", num(m.bias_mcse)},
           {"rmse", num(m.rmse)},
           {"coverage", num(m.coverage)},
           {"ci_width", num(m.ci_width)},
           {"rejection_kind", m.rejection_kind()},
           {"rejection_rate", num(m.rejection_rate)},
           {"mean_tau2", num(m.mean_tau2)},
           {"redraws", m.redraws},
           {"corrections", m.corrections}};
    if (m.agreement)
      j["agreement"] = {{"compared", m.agreement->compared},
                        {"agreeing", m.agreement->agreeing},
                        {"max_dmu", num(m.agreement->max_dmu)},
                        {"max_dtau2", num(m.agreement->max_dtau2)}};
    rows.push_back(std::move(j));
  }
  return json{{"rows", rows}};
}

inline void write_timing_csv(std::ostream& os, const MetricsReport& r) {
  os << "measure,k,mu,tau2,model,mean_seconds\n";
  for (const auto& t : r.timing)
    os << to_string(t.measure) << ',' << t.k << ',' << csv::format_number(t.mu) << ','
       << csv::format_number(t.tau2) << ',' << to_string(t.model) << ',' << csv::format_number(t.mean_seconds)
       << '\n';
}

// Per-replicate estimates, one row per (config, rep, model).
inline void write_raw_csv(std::ostream& os, const MetricsReport& r) {
  using csv::format_number;
  os << "measure,k,mu,tau2,rep,model,converged,estimate,se,tau2_hat,ref_estimate,ref_tau2\n";
  for (const auto& [cfg, reps] : r.raw)
    for (const auto& rr : reps)
      for (const auto& f : rr.fits) {
        os << to_string(cfg.measure) << ',' << cfg.k << ',' << format_number(cfg.mu) << ','
           << format_number(cfg.tau2) << ',' << rr.rep << ',' << to_string(f.model) << ',' << (f.converged ? 1 : 0)
           << ',' << format_number(f.mu) << ',' << format_number(f.se) << ',' << format_number(f.tau2) << ',';
        if (f.model == Model::NN && rr.reference)
          os << format_number(rr.reference->mu) << ',' << format_number(rr.reference->tau2);
        else
          os << ',';
        os << '\n';
      }
}

}  // namespace metafit::sim
