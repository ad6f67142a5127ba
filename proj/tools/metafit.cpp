// metafit command-line front end: fit, vcalc, escalc, simulate.
//
// Exit codes: 0 success, 1 input error, 2 fit did not converge.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metafit/metafit.hpp"

namespace {

using namespace metafit;

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNoConvergence = 2;

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
}

std::string table_view(const Summary& s) {
  std::ostringstream os;
  auto f = [](double x) { return csv::format_number(x, 4); };
  os << "fixed effects:\n";
  for (const auto& r : s.fixed)
    os << "  " << r.name << "  estimate " << f(r.estimate) << "  se " << f(r.se) << "  z " << f(r.z) << "  p "
       << f(r.p) << "  [" << f(r.wald_lo) << ", " << f(r.wald_hi) << "]\n";
  if (!s.dispersion.empty()) {
    os << "dispersion (log SD):\n";
    for (const auto& r : s.dispersion)
      os << "  " << r.name << "  estimate " << f(r.estimate) << "  se " << f(r.se) << "  p " << f(r.p) << "\n";
  }
  if (!s.components.empty()) {
    os << "variance components:\n";
    for (const auto& c : s.components)
      os << "  " << c.name << "  variance " << f(c.variance) << "  sd " << f(c.sd) << (c.boundary ? "  (boundary)" : "")
         << "\n";
  }
  for (const auto& c : s.correlations) os << "  corr " << c.name << "  " << f(c.value) << "\n";
  os << "loglik " << f(s.loglik) << "  AIC " << f(s.aic) << "  BIC " << f(s.bic) << "  n " << s.n
     << (s.converged ? "" : "  NOT CONVERGED") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data, formula, dispformula, family = "gaussian", out, format = "json";
  std::vector<std::string> vcv;
  bool reml = false, ml = false, exact = false, profile = false;
  double level = 0.95;
  double zero_disp_jitter = 0.0;
  std::string vi_col = "vi", obs_col, cluster_col;
  std::string size_col = "n", treatment_label = "treatment", control_label = "control";
  std::string study_intercepts = "fixed";
};

std::map<std::string, SamplingCovariance> load_bindings(const std::vector<std::string>& specs) {
  std::map<std::string, SamplingCovariance> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
      throw InputError("--vcv expects name=path, got '" + s + "'");
    const std::string name = s.substr(0, eq);
    if (out.count(name)) throw InputError("--vcv binds matrix " + name + " twice");
    out.emplace(name, load_matrix(s.substr(eq + 1)));
  }
  return out;
}

int cmd_fit(const FitArgs& a, bool disp_given, bool reml_given) {
  if (a.reml && a.ml) throw InputError("--reml and --ml are mutually exclusive");
  const Family fam = parse_family(a.family);
  ModelSpec spec = parse_formula(a.formula);
  spec.family = fam;
  FitResult f;

  if (fam == Family::gaussian) {
    if (disp_given) spec.disp = parse_dispformula(a.dispformula);
    spec.reml = !a.ml;
    const csv::Table raw = csv::read_file(a.data);
    ColumnMap map;
    map.y = spec.response;
    map.v = raw.column(a.vi_col) ? a.vi_col : std::string();
    map.obs = a.obs_col;
    map.cluster = a.cluster_col;
    const EffectSizeTable table = table_from_csv(raw, map, a.data);
    const auto matrices = load_bindings(a.vcv);
    GaussianModel model(build_design(spec, table, matrices), spec.reml, a.zero_disp_jitter);
    f = fit(model);
    Summary s = summarize(f, a.level, true);
    nlohmann::json j = to_json(s, a.exact ? 0 : 6);
    j["family"] = "gaussian";
    j["formula"] = to_string(spec);
    if (a.profile && f.converged) {
      nlohmann::json prof = nlohmann::json::array();
      for (int k = 0; k < f.beta.size(); ++k) {
        const ProfileInterval pi = profile_ci(model, f, ParamRef::coefficient(k), a.level);
        prof.push_back({{"name", f.beta_names[static_cast<std::size_t>(k)]},
                        {"lo", json_number(pi.lo, a.exact ? 0 : 6)},
                        {"hi", json_number(pi.hi, a.exact ? 0 : 6)},
                        {"wald_fallback", pi.lo_wald || pi.hi_wald}});
      }
      j["profile"] = prof;
    }
    write_text(a.out, a.format == "table" ? table_view(s) : j.dump(2) + "\n");
  } else {
    if (disp_given)
      throw InputError("--dispformula applies to the gaussian family only; " + std::string(to_string(fam)) +
                       " one-stage models have no dispersion parameter");
    if (!a.vcv.empty()) throw InputError("--vcv applies to the gaussian family only");
    if (reml_given && a.reml) throw InputError("--reml is not defined for one-stage models; they are fitted by ML");
    if (spec.fixed.terms.size() != 1 || spec.random.size() != 1)
      throw InputError("one-stage formula must look like 'events ~ arm + (1|study)'");
    ArmColumnMap map;
    map.events = spec.response;
    map.arm = spec.fixed.terms[0];
    map.study = spec.random[0].group;
    map.size = a.size_col;
    map.treatment_label = a.treatment_label;
    map.control_label = a.control_label;
    OneStageModel m;
    m.family = fam;
    m.data = load_arm_table(a.data, map);
    if (a.study_intercepts == "random") m.intercepts = StudyIntercepts::random;
    else if (a.study_intercepts != "fixed") throw InputError("--study-intercepts must be fixed or random");
    f = fit_onestage(m);
    Summary s = summarize(f, a.level, true);
    nlohmann::json j = to_json(s, a.exact ? 0 : 6);
    j["family"] = to_string(fam);
    j["formula"] = to_string(spec);
    write_text(a.out, a.format == "table" ? table_view(s) : j.dump(2) + "\n");
  }
  if (!f.converged) {
    std::cerr << "metafit: fit did not converge (" << f.message << ")\n";
    return kExitNoConvergence;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// vcalc / escalc
// ---------------------------------------------------------------------------

struct VcalcArgs {
  std::string data, out, vi_col = "vi", cluster_col = "study", obs_col;
  double rho = 0.0;
};

int cmd_vcalc(const VcalcArgs& a) {
  if (!(a.rho > -1 && a.rho < 1)) throw InputError("--rho must lie in (-1, 1)");
  ColumnMap map;
  map.y = a.vi_col;  // the effect sizes are not needed; any numeric column will do
  map.v = a.vi_col;
  map.cluster = a.cluster_col;
  map.obs = a.obs_col;
  const EffectSizeTable t = load_table(a.data, map);
  std::ostringstream os;
  write_matrix(os, vcalc_constant_rho(t, a.rho));
  write_text(a.out, os.str());
  return kExitOk;
}

struct EscalcArgs {
  std::string data, out, measure, study_col;
  bool cc = false;
  bool smd_d_variance = false;
};

int cmd_escalc(const EscalcArgs& a) {
  const Measure m = parse_measure(a.measure);
  const csv::Table t = csv::read_file(a.data);
  auto col = [&](const std::string& name) {
    auto j = t.column(name);
    if (!j) throw InputError(a.data + ": missing column '" + name + "' needed for " + a.measure);
    return *j;
  };
  auto num = [&](std::size_t row, std::size_t j) {
    auto v = csv::to_double(t.rows[row][j]);
    if (!v) throw InputError(a.data + ": non-numeric " + t.header[j] + " in row " + std::to_string(row + 1));
    return *v;
  };
  std::optional<std::size_t> js;
  if (!a.study_col.empty()) js = col(a.study_col);
  std::vector<StudyArms> studies;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    StudyArms s;
    s.study = js ? t.rows[i][*js] : std::to_string(i + 1);
    switch (m) {
      case Measure::SMD:
      case Measure::lnRR:
        s.treatment = {num(i, col("m1i")), num(i, col("sd1i")), num(i, col("n1i")), 0, 0};
        s.control = {num(i, col("m2i")), num(i, col("sd2i")), num(i, col("n2i")), 0, 0};
        break;
      case Measure::lnOR: {
        const double ai = num(i, col("ai")), bi = num(i, col("bi")), ci = num(i, col("ci")), di = num(i, col("di"));
        s.treatment = {0, 0, ai + bi, ai, ai + bi};
        s.control = {0, 0, ci + di, ci, ci + di};
        break;
      }
      case Measure::lnIRR:
        s.treatment = {0, 0, 0, num(i, col("x1i")), num(i, col("t1i"))};
        s.control = {0, 0, 0, num(i, col("x2i")), num(i, col("t2i"))};
        break;
    }
    studies.push_back(s);
  }
  EscalcOptions opt;
  opt.continuity_correction = a.cc;
  opt.smd_variance_uses_g = !a.smd_d_variance;
  std::ostringstream os;
  os << "study,yi,vi\n";
  for (const auto& s : studies) {
    const EffectSize e = compute_effect(m, s, opt);
    os << csv::quote_if_needed(s.study) << ',' << csv::format_number(e.y) << ',' << csv::format_number(e.v) << '\n';
  }
  write_text(a.out, os.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config, out_prefix = "simulation";
  std::map<std::string, std::string> settings;
  int threads = 0;
  bool dump_reps = false;
};

int cmd_simulate(const SimulateArgs& a) {
  sim::SimGrid g = sim::default_grid();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw InputError("cannot open config '" + a.config + "'");
    g = sim::parse_grid_config(in, g, a.config);
  }
  for (const auto& [k, v] : a.settings) sim::apply_setting(g, k, v);
  const auto configs = sim::expand(g);
  const int threads = a.threads > 0 ? a.threads : sim::default_threads();
  const sim::MetricsReport rep = sim::run(configs, threads, a.dump_reps);

  std::ostringstream csv_out, timing;
  sim::write_csv(csv_out, rep);
  write_text(a.out_prefix + ".csv", csv_out.str());
  write_text(a.out_prefix + ".json", sim::to_json(rep).dump(2) + "\n");
  sim::write_timing_csv(timing, rep);
  write_text(a.out_prefix + ".timing.csv", timing.str());
  if (a.dump_reps) {
    std::ostringstream raw;
    sim::write_raw_csv(raw, rep);
    write_text(a.out_prefix + ".reps.csv", raw.str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Likelihood-based meta-analytic mixed models with known sampling covariance"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "fit a model and write a JSON summary");
  fit_cmd->add_option("--data", fa.data, "CSV data file")->required();
  fit_cmd->add_option("--formula", fa.formula, "model formula, e.g. 'yi ~ 1 + (1|study) + equalto(0 + id|g, V)'")
      ->required();
  fit_cmd->add_option("--vcv", fa.vcv, "bind a matrix name to a labeled CSV file: NAME=PATH")->take_all();
  auto* disp_opt = fit_cmd->add_option("--dispformula", fa.dispformula, "dispersion formula (default ~1)");
  auto* reml_opt = fit_cmd->add_flag("--reml", fa.reml, "restricted maximum likelihood (gaussian default)");
  fit_cmd->add_flag("--ml", fa.ml, "maximum likelihood");
  fit_cmd->add_option("--family", fa.family, "gaussian, binomial or poisson");
  fit_cmd->add_option("--out", fa.out, "output path (default stdout)");
  fit_cmd->add_option("--format", fa.format, "json or table")->check(CLI::IsMember({"json", "table"}));
  fit_cmd->add_flag("--exact", fa.exact, "full-precision numbers in the JSON summary");
  fit_cmd->add_flag("--profile", fa.profile, "add profile-likelihood intervals for fixed effects");
  fit_cmd->add_option("--level", fa.level, "confidence level");
  fit_cmd->add_option("--zero-disp-jitter", fa.zero_disp_jitter, "residual variance used by dispformula ~0");
  fit_cmd->add_option("--vi-col", fa.vi_col, "sampling-variance column, if present");
  fit_cmd->add_option("--obs-col", fa.obs_col, "observation-id column");
  fit_cmd->add_option("--cluster-col", fa.cluster_col, "cluster column");
  fit_cmd->add_option("--size-col,--time-col", fa.size_col, "arm size (binomial) or person-time (poisson) column");
  fit_cmd->add_option("--treatment-label", fa.treatment_label, "arm label of treatment rows");
  fit_cmd->add_option("--control-label", fa.control_label, "arm label of control rows");
  fit_cmd->add_option("--study-intercepts", fa.study_intercepts, "fixed or random");

  VcalcArgs va;
  auto* vcalc_cmd = app.add_subcommand("vcalc", "sampling covariance with a constant within-cluster correlation");
  vcalc_cmd->add_option("--data", va.data, "CSV data file")->required();
  vcalc_cmd->add_option("--rho", va.rho, "within-cluster correlation")->required();
  vcalc_cmd->add_option("--vi-col", va.vi_col, "sampling-variance column");
  vcalc_cmd->add_option("--cluster", va.cluster_col, "cluster column");
  vcalc_cmd->add_option("--obs", va.obs_col, "observation-id column (default 1..n)");
  vcalc_cmd->add_option("--out", va.out, "output path (default stdout)");

  EscalcArgs ea;
  auto* escalc_cmd = app.add_subcommand("escalc", "effect sizes from arm-level summaries");
  escalc_cmd->add_option("--measure", ea.measure, "SMD, lnRR, lnOR or lnIRR")->required();
  escalc_cmd->add_option("--data", ea.data, "CSV with m1i,sd1i,n1i,m2i,sd2i,n2i / ai,bi,ci,di / x1i,t1i,x2i,t2i")
      ->required();
  escalc_cmd->add_option("--study-col", ea.study_col, "study label column");
  escalc_cmd->add_flag("--cc", ea.cc, "add 0.5 to every cell of studies with a zero cell");
  escalc_cmd->add_flag("--smd-d-variance", ea.smd_d_variance, "use d instead of g in the SMD variance");
  escalc_cmd->add_option("--out", ea.out, "output path (default stdout)");

  SimulateArgs sa;
  std::string s_measure, s_k, s_tau2, s_mu, s_reps, s_seed, s_models;
  auto* sim_cmd = app.add_subcommand("simulate", "simulation benchmark");
  sim_cmd->add_option("--config", sa.config, "key = value grid file");
  sim_cmd->add_option("--measure", s_measure, "comma-separated measures");
  sim_cmd->add_option("--k", s_k, "comma-separated study counts");
  sim_cmd->add_option("--tau2", s_tau2, "comma-separated heterogeneity values");
  sim_cmd->add_option("--mu", s_mu, "comma-separated true means (default 0 and a moderate value per measure)");
  sim_cmd->add_option("--reps", s_reps, "replicates per configuration");
  sim_cmd->add_option("--seed", s_seed, "RNG seed");
  sim_cmd->add_option("--models", s_models, "comma-separated subset of NN,BN,PN");
  sim_cmd->add_option("--threads", sa.threads, "worker threads (default METAFIT_THREADS or all cores)");
  sim_cmd->add_option("--out-prefix", sa.out_prefix, "writes PREFIX.csv, PREFIX.json, PREFIX.timing.csv");
  sim_cmd->add_flag("--dump-reps", sa.dump_reps, "also write per-replicate estimates to PREFIX.reps.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*fit_cmd) return cmd_fit(fa, disp_opt->count() > 0, reml_opt->count() > 0);
    if (*vcalc_cmd) return cmd_vcalc(va);
    if (*escalc_cmd) return cmd_escalc(ea);
    if (*sim_cmd) {
      const std::pair<const char*, std::string*> flags[] = {{"measure", &s_measure}, {"k", &s_k},
                                                            {"tau2", &s_tau2},       {"mu", &s_mu},
                                                            {"reps", &s_reps},       {"seed", &s_seed},
                                                            {"models", &s_models}};
      for (const auto& [key, val] : flags)
        if (!val->empty()) sa.settings[key] = *val;
      return cmd_simulate(sa);
    }
  } catch (const InputError& e) {
    std::cerr << "metafit: " << e.what() << "\n";
    return kExitInput;
  } catch (const FitError& e) {
    std::cerr << "metafit: " << e.what() << "\n";
    return kExitNoConvergence;
  } catch (const std::exception& e) {
    std::cerr << "metafit: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
