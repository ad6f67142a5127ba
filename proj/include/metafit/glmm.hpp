#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "metafit/data.hpp"
#include "metafit/error.hpp"
#include "metafit/formula.hpp"
#include "metafit/gaussian.hpp"
#include "metafit/optimize.hpp"

namespace metafit {

enum class StudyIntercepts { fixed, random };

// One-stage Binomial-Normal / Poisson-Normal model for two-arm studies:
//   eta_control   = alpha_i              (+ log t for Poisson)
//   eta_treatment = alpha_i + mu + b_i   (+ log t for Poisson)
//   b_i ~ N(0, tau^2)
// Packed parameters:
//   fixed intercepts:  (alpha_1..alpha_k, mu, log tau)
//   random intercepts: (alpha, mu, log sd_alpha, log tau), alpha_i = alpha + a_i
struct OneStageModel {
  Family family = Family::binomial;
  ArmTable data;
  StudyIntercepts intercepts = StudyIntercepts::fixed;

  int k() const { return static_cast<int>(data.size()); }
  int q() const { return intercepts == StudyIntercepts::fixed ? 1 : 2; }
  int n_params() const { return intercepts == StudyIntercepts::fixed ? k() + 2 : 4; }
  int mu_index() const { return intercepts == StudyIntercepts::fixed ? k() : 1; }
  int log_tau_index() const { return n_params() - 1; }

  void validate() const {
    if (family == Family::gaussian) throw InputError("one-stage models need family binomial or poisson");
    data.validate();
    if (family == Family::binomial)
      for (const auto& s : data.studies)
        if (s.events_treatment > s.size_treatment || s.events_control > s.size_control ||
            s.size_treatment != std::floor(s.size_treatment) || s.size_control != std::floor(s.size_control))
          throw InputError("binomial arms need integer sizes not below the event count (study '" + s.study + "')");
  }
};

// Log-likelihood of one arm and its first three derivatives in eta.
struct ArmDerivs {
  double l = 0, d1 = 0, d2 = 0, d3 = 0;
};

inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline ArmDerivs arm_loglik(Family fam, double events, double size, double eta) {
  ArmDerivs a;
  if (fam == Family::binomial) {
    const double p = 1.0 / (1.0 + std::exp(-eta));
    const double w = p * (1.0 - p);
    a.l = std::lgamma(size + 1) - std::lgamma(events + 1) - std::lgamma(size - events + 1) + events * eta -
          size * log1pexp(eta);
    a.d1 = events - size * p;
    a.d2 = -size * w;
    a.d3 = -size * w * (1.0 - 2.0 * p);
  } else if (fam == Family::gaussian) {
    // Normal arm: `events` is the observed value and `size` its known variance.
    // The integrand is then Gaussian in b and the Laplace step is exact.
    const double r = events - eta;
    a.l = -0.5 * (kLog2Pi + std::log(size) + r * r / size);
    a.d1 = r / size;
    a.d2 = -1.0 / size;
    a.d3 = 0.0;
  } else {
    // eta already carries the log person-time offset.
    const double mu = std::exp(eta);
    a.l = events * eta - mu - std::lgamma(events + 1);
    a.d1 = events - mu;
    a.d2 = -mu;
    a.d3 = -mu;
  }
  return a;
}

namespace detail {

// Linear structure of one study: eta = offset + A * (lin params) + B * b.
struct StudyLayout {
  int lin[2];                // global indices of the two linear parameters
  Eigen::Matrix2d A;         // rows: control, treatment
  Eigen::MatrixXd B;         // 2 x q
  std::vector<int> var_idx;  // global index of each random effect's log-SD
  double events[2];
  double size[2];
  double offset[2];
};

inline StudyLayout layout(const OneStageModel& m, int i) {
  StudyLayout L;
  const auto& s = m.data.studies[static_cast<std::size_t>(i)];
  L.A << 1, 0, 1, 1;
  if (m.intercepts == StudyIntercepts::fixed) {
    L.lin[0] = i;
    L.lin[1] = m.k();
    L.B.resize(2, 1);
    L.B << 0, 1;
    L.var_idx = {m.k() + 1};
  } else {
    L.lin[0] = 0;
    L.lin[1] = 1;
    L.B.resize(2, 2);
    L.B << 1, 0, 1, 1;
    L.var_idx = {2, 3};
  }
  L.events[0] = s.events_control;
  L.events[1] = s.events_treatment;
  L.size[0] = s.size_control;
  L.size[1] = s.size_treatment;
  const bool pois = m.family == Family::poisson;
  L.offset[0] = pois ? std::log(s.size_control) : 0.0;
  L.offset[1] = pois ? std::log(s.size_treatment) : 0.0;
  return L;
}

struct StudyState {
  double f = 0;
  Eigen::VectorXd grad_b;
  Eigen::MatrixXd H;  // -d2 f / db2
  ArmDerivs arm[2];
};

inline StudyState study_state(const OneStageModel& m, const StudyLayout& L, const Eigen::VectorXd& params,
                              const Eigen::VectorXd& b) {
  StudyState st;
  const int q = static_cast<int>(b.size());
  st.grad_b = Eigen::VectorXd::Zero(q);
  st.H = Eigen::MatrixXd::Zero(q, q);
  for (int a = 0; a < 2; ++a) {
    double eta = L.offset[a] + L.A(a, 0) * params(L.lin[0]) + L.A(a, 1) * params(L.lin[1]) + L.B.row(a).dot(b);
    st.arm[a] = arm_loglik(m.family, L.events[a], L.size[a], eta);
    st.f += st.arm[a].l;
    st.grad_b += st.arm[a].d1 * L.B.row(a).transpose();
    st.H -= st.arm[a].d2 * L.B.row(a).transpose() * L.B.row(a);
  }
  for (int k = 0; k < q; ++k) {
    const double s = params(L.var_idx[static_cast<std::size_t>(k)]);
    const double inv_v = std::exp(-2.0 * s);
    st.f += -0.5 * b(k) * b(k) * inv_v - s - 0.5 * kLog2Pi;
    st.grad_b(k) -= b(k) * inv_v;
    st.H(k, k) += inv_v;
  }
  return st;
}

// Maximizes the study's joint log-density over b. Returns false on failure.
inline bool inner_mode(const OneStageModel& m, const StudyLayout& L, const Eigen::VectorXd& params,
                       Eigen::VectorXd& b) {
  StudyState st = study_state(m, L, params, b);
  if (!std::isfinite(st.f)) {
    b.setZero();
    st = study_state(m, L, params, b);
  }
  for (int it = 0; it < 50; ++it) {
    Eigen::LLT<Eigen::MatrixXd> llt(st.H);
    if (llt.info() != Eigen::Success) break;
    Eigen::VectorXd step = llt.solve(st.grad_b);
    if (!step.allFinite()) break;
    double t = 1.0;
    bool moved = false;
    for (int h = 0; h < 60; ++h) {
      Eigen::VectorXd bn = b + t * step;
      StudyState sn = study_state(m, L, params, bn);
      if (std::isfinite(sn.f) && sn.f >= st.f - 1e-12 * std::abs(st.f)) {
        b = bn;
        st = std::move(sn);
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
    if ((t * step).lpNorm<Eigen::Infinity>() < 1e-10) return true;
  }
  if (st.grad_b.lpNorm<Eigen::Infinity>() < 1e-8 * std::max(1.0, st.H.diagonal().maxCoeff())) return true;

  // Safeguarded bisection on the (monotone) score for a scalar random effect.
  if (b.size() != 1) return false;
  auto score = [&](double x) {
    Eigen::VectorXd bx(1);
    bx(0) = x;
    return study_state(m, L, params, bx).grad_b(0);
  };
  double lo = b(0) - 1.0, hi = b(0) + 1.0;
  for (int k = 0; k < 60 && score(lo) < 0; ++k) lo -= (hi - lo);
  for (int k = 0; k < 60 && score(hi) > 0; ++k) hi += (hi - lo);
  if (!(score(lo) >= 0 && score(hi) <= 0)) return false;
  for (int k = 0; k < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(lo)); ++k) {
    const double mid = 0.5 * (lo + hi);
    if (score(mid) > 0) lo = mid;
    else hi = mid;
  }
  b(0) = 0.5 * (lo + hi);
  return true;
}

}  // namespace detail

// Warm-start storage for the per-study inner modes.
struct LaplaceWorkspace {
  std::vector<Eigen::VectorXd> modes;
  bool failed = false;
};

// Sum over studies of the joint log-density log f(y | b) + log phi(b).
// `b` holds the k*q random effects, study-major.
inline double joint_logdensity(const OneStageModel& m, const Eigen::VectorXd& params, const Eigen::VectorXd& b) {
  const int q = m.q();
  if (b.size() != static_cast<Eigen::Index>(m.k()) * q) throw std::invalid_argument("random-effect vector has wrong length");
  double total = 0;
  for (int i = 0; i < m.k(); ++i) {
    auto L = detail::layout(m, i);
    total += detail::study_state(m, L, params, b.segment(static_cast<Eigen::Index>(i) * q, q)).f;
  }
  return total;
}

// Laplace-approximated negative marginal log-likelihood,
//   -sum_i [ f_i(b_i*) + (q/2) log 2pi - 0.5 log|H_i| ],
// with an exact gradient through the implicit dependence of b_i* on the parameters.
inline double laplace_nll(const OneStageModel& m, const Eigen::VectorXd& params, Eigen::VectorXd* grad = nullptr,
                          LaplaceWorkspace* ws = nullptr) {
  const int k = m.k(), q = m.q(), np = m.n_params();
  if (params.size() != np) throw std::invalid_argument("wrong parameter count for one-stage model");
  if (!params.allFinite()) return std::numeric_limits<double>::infinity();
  LaplaceWorkspace local;
  LaplaceWorkspace& w = ws ? *ws : local;
  if (static_cast<int>(w.modes.size()) != k) w.modes.assign(static_cast<std::size_t>(k), Eigen::VectorXd::Zero(q));
  w.failed = false;
  if (grad) *grad = Eigen::VectorXd::Zero(np);

  double total = 0;
  for (int i = 0; i < k; ++i) {
    auto L = detail::layout(m, i);
    Eigen::VectorXd& b = w.modes[static_cast<std::size_t>(i)];
    if (!b.allFinite()) b.setZero();
    if (!detail::inner_mode(m, L, params, b)) {
      w.failed = true;
      b.setZero();
      return std::numeric_limits<double>::infinity();
    }
    detail::StudyState st = detail::study_state(m, L, params, b);
    Eigen::LLT<Eigen::MatrixXd> llt(st.H);
    if (llt.info() != Eigen::Success) {
      w.failed = true;
      return std::numeric_limits<double>::infinity();
    }
    double logdetH = 0;
    for (int a = 0; a < q; ++a) logdetH += 2.0 * std::log(llt.matrixLLT()(a, a));
    const double Li = st.f + 0.5 * q * kLog2Pi - 0.5 * logdetH;
    if (!std::isfinite(Li)) return std::numeric_limits<double>::infinity();
    total -= Li;
    if (!grad) continue;

    const Eigen::MatrixXd Hinv = llt.solve(Eigen::MatrixXd::Identity(q, q));
    // dH/db_j
    std::vector<Eigen::MatrixXd> dH_db(static_cast<std::size_t>(q), Eigen::MatrixXd::Zero(q, q));
    for (int j = 0; j < q; ++j)
      for (int a = 0; a < 2; ++a)
        dH_db[j] -= st.arm[a].d3 * L.B(a, j) * L.B.row(a).transpose() * L.B.row(a);

    auto accumulate = [&](int gidx, double df, const Eigen::VectorXd& dfb, const Eigen::MatrixXd& dHp) {
      const Eigen::VectorXd db = Hinv * dfb;
      Eigen::MatrixXd dH = dHp;
      for (int j = 0; j < q; ++j) dH += dH_db[j] * db(j);
      const double dL = df - 0.5 * (Hinv.cwiseProduct(dH)).sum();
      (*grad)(gidx) -= dL;
    };
    for (int c = 0; c < 2; ++c) {
      double df = 0;
      Eigen::VectorXd dfb = Eigen::VectorXd::Zero(q);
      Eigen::MatrixXd dHp = Eigen::MatrixXd::Zero(q, q);
      for (int a = 0; a < 2; ++a) {
        const double Aac = L.A(a, c);
        if (Aac == 0) continue;
        df += st.arm[a].d1 * Aac;
        dfb += st.arm[a].d2 * Aac * L.B.row(a).transpose();
        dHp -= st.arm[a].d3 * Aac * L.B.row(a).transpose() * L.B.row(a);
      }
      accumulate(L.lin[c], df, dfb, dHp);
    }
    for (int j = 0; j < q; ++j) {
      const double inv_v = std::exp(-2.0 * params(L.var_idx[static_cast<std::size_t>(j)]));
      Eigen::VectorXd dfb = Eigen::VectorXd::Zero(q);
      dfb(j) = 2.0 * b(j) * inv_v;
      Eigen::MatrixXd dHp = Eigen::MatrixXd::Zero(q, q);
      dHp(j, j) = -2.0 * inv_v;
      accumulate(L.var_idx[static_cast<std::size_t>(j)], b(j) * b(j) * inv_v - 1.0, dfb, dHp);
    }
  }
  return total;
}

// Checks for complete separation, which leaves the treatment effect unidentified.
inline void check_separation(const OneStageModel& m) {
  const auto& st = m.data.studies;
  auto all = [&](auto pred) { return std::all_of(st.begin(), st.end(), pred); };
  const bool t_zero = all([](const StudyCounts& s) { return s.events_treatment == 0; });
  const bool c_zero = all([](const StudyCounts& s) { return s.events_control == 0; });
  bool t_full = false, c_full = false;
  if (m.family == Family::binomial) {
    t_full = all([](const StudyCounts& s) { return s.events_treatment == s.size_treatment; });
    c_full = all([](const StudyCounts& s) { return s.events_control == s.size_control; });
  }
  if (t_zero || c_zero || t_full || c_full)
    throw InputError(
        "complete separation: every study has an all-zero or all-event arm on one side; "
        "use a continuity-corrected two-stage (gaussian) analysis instead");
}

inline Eigen::VectorXd initial_onestage_params(const OneStageModel& m) {
  const int k = m.k();
  std::vector<double> base(static_cast<std::size_t>(k)), eff(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const auto& s = m.data.studies[static_cast<std::size_t>(i)];
    if (m.family == Family::binomial) {
      base[i] = std::log((s.events_control + 0.5) / (s.size_control - s.events_control + 0.5));
      const double lt = std::log((s.events_treatment + 0.5) / (s.size_treatment - s.events_treatment + 0.5));
      eff[i] = lt - base[i];
    } else {
      base[i] = std::log((s.events_control + 0.5) / s.size_control);
      eff[i] = std::log((s.events_treatment + 0.5) / s.size_treatment) - base[i];
    }
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  auto sd = [&](const std::vector<double>& v) {
    const double mu = mean(v);
    double ss = 0;
    for (double x : v) ss += (x - mu) * (x - mu);
    return v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  Eigen::VectorXd p(m.n_params());
  const double log_tau0 = std::log(std::max(0.5 * sd(eff), 0.1));
  if (m.intercepts == StudyIntercepts::fixed) {
    for (int i = 0; i < k; ++i) p(i) = base[i];
    p(k) = mean(eff);
    p(k + 1) = log_tau0;
  } else {
    p << mean(base), mean(eff), std::log(std::max(sd(base), 0.1)), log_tau0;
  }
  return p;
}

struct OneStageOptions {
  optim::Options optim;
  int restarts = 3;
  unsigned restart_seed = 77031u;
};

// Maximum likelihood fit of the Laplace objective. Standard errors come from
// the inverse observed information of the same objective.
inline FitResult fit_onestage(const OneStageModel& m, const OneStageOptions& opts = {}) {
  m.validate();
  if (m.k() < 2) throw InputError("one-stage fit needs at least two studies");
  check_separation(m);
  const int np = m.n_params();
  LaplaceWorkspace ws;
  optim::Objective obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return laplace_nll(m, x, g, &ws); };

  const Eigen::VectorXd start = initial_onestage_params(m);
  optim::Result best = optim::bfgs(obj, start, opts.optim);
  int iters = best.iterations;
  std::mt19937_64 rng(opts.restart_seed);
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (int r = 0; r < opts.restarts && !best.converged; ++r) {
    Eigen::VectorXd s = start;
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) += jitter(rng);
    ws.modes.clear();
    optim::Result res = optim::bfgs(obj, s, opts.optim);
    iters += res.iterations;
    if ((res.converged && !best.converged) || (res.converged == best.converged && res.f < best.f)) best = std::move(res);
  }

  FitResult f;
  ws.modes.clear();
  Eigen::VectorXd g;
  f.nll = laplace_nll(m, best.x, &g, &ws);
  f.loglik = -f.nll;
  f.converged = best.converged && std::isfinite(f.nll);
  f.n_iter = iters;
  f.message = best.message;
  f.grad_norm = g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0;
  f.reml = false;
  f.n_obs = 2L * m.k();
  f.n_groups["study"] = m.k();

  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(np, np, std::numeric_limits<double>::quiet_NaN());
  if (std::isfinite(f.nll)) {
    Eigen::MatrixXd H = optim::hessian_from_gradient(obj, best.x);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0).all())
      cov = ldlt.solve(Eigen::MatrixXd::Identity(np, np));
  }

  // Linear-predictor coefficients first, then log-SDs.
  std::vector<int> lin, var;
  if (m.intercepts == StudyIntercepts::fixed) {
    for (int i = 0; i < m.k(); ++i) {
      lin.push_back(i);
      f.beta_names.push_back("study" + m.data.studies[static_cast<std::size_t>(i)].study);
    }
    lin.push_back(m.k());
    f.beta_names.push_back("treatment");
    var = {m.k() + 1};
    f.param_names = {"log_tau"};
  } else {
    lin = {0, 1};
    f.beta_names = {"(Intercept)", "treatment"};
    var = {2, 3};
    f.param_names = {"log_sd_intercept", "log_tau"};
  }
  f.beta = best.x(lin);
  f.beta_cov = cov(lin, lin);
  f.params = best.x(var);
  f.param_cov = cov(var, var);
  f.term_labels = f.param_names;
  const double floor_var = std::exp(2 * kBoundaryLogSd);
  if (m.intercepts == StudyIntercepts::random) {
    const double va = std::exp(2 * best.x(2));
    f.variance_components.push_back({"study_intercept", va, va <= floor_var});
  }
  const double tau2 = std::exp(2 * best.x(m.log_tau_index()));
  f.variance_components.push_back({"tau2", tau2, tau2 <= floor_var});
  for (Eigen::Index j = 0; j < f.params.size(); ++j) {
    f.theta.push_back(f.params.segment(j, 1));
    f.G.push_back(Eigen::MatrixXd::Constant(1, 1, std::exp(2 * f.params(j))));
  }
  return f;
}

}  // namespace metafit
