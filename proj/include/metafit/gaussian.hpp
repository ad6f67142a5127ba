#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metafit/covstruct.hpp"
#include "metafit/error.hpp"
#include "metafit/formula.hpp"
#include "metafit/optimize.hpp"

namespace metafit {

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct VarianceComponent {
  std::string name;
  double variance = 0.0;
  bool boundary = false;
};

struct Correlation {
  std::string name;
  double value = 0.0;
};

// Estimates and diagnostics of a converged (or failed) fit. Shared by the
// Gaussian and one-stage engines.
struct FitResult {
  std::vector<std::string> beta_names;
  Eigen::VectorXd beta;
  Eigen::MatrixXd beta_cov;

  std::vector<std::string> term_labels;
  std::vector<Eigen::VectorXd> theta;  // per random term, internal scale
  std::vector<Eigen::MatrixXd> G;      // per random term, materialized

  std::vector<std::string> delta_names;  // dispersion model, log-SD scale
  Eigen::VectorXd delta;

  std::vector<std::string> param_names;  // packed (theta..., delta...)
  Eigen::VectorXd params;
  Eigen::MatrixXd param_cov;

  std::vector<VarianceComponent> variance_components;
  std::vector<Correlation> correlations;
  std::optional<double> residual_sd;  // set for an intercept-only or zero dispersion model

  double nll = std::numeric_limits<double>::quiet_NaN();
  double loglik = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  int n_iter = 0;
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  std::string message;
  bool reml = true;
  long n_obs = 0;
  std::map<std::string, int> n_groups;
  std::vector<std::string> warnings;

  int n_parameters() const { return static_cast<int>(beta.size() + params.size()); }

  bool any_boundary() const {
    return std::any_of(variance_components.begin(), variance_components.end(),
                       [](const VarianceComponent& v) { return v.boundary; });
  }

  const VarianceComponent* component(const std::string& name) const {
    for (const auto& v : variance_components)
      if (v.name == name) return &v;
    return nullptr;
  }
};

// Gaussian marginal model y ~ N(X beta, Sigma), with
// Sigma = sum_r C_r(G_r(theta_r)) + diag(exp(2 X_disp delta)).
class GaussianModel {
 public:
  GaussianModel(DesignBundle design, bool reml, double zero_disp_jitter = 0.0)
      : design_(std::move(design)), reml_(reml), zero_disp_jitter_(zero_disp_jitter) {
    int off = 0;
    for (const auto& r : design_.random) {
      switch (r.term.structure) {
        case Structure::iid: structures_.push_back(CovarianceStructure::iid(r.q())); break;
        case Structure::diag: structures_.push_back(CovarianceStructure::diag(r.q())); break;
        case Structure::unstructured: structures_.push_back(CovarianceStructure::unstructured(r.q())); break;
        case Structure::equalto: structures_.push_back(CovarianceStructure::equalto(*r.fixed_matrix)); break;
        case Structure::propto: structures_.push_back(CovarianceStructure::propto(*r.fixed_matrix)); break;
      }
      theta_offset_.push_back(off);
      off += structures_.back().n_params();
    }
    n_theta_ = off;
    build_blocks();
  }

  static GaussianModel from_spec(const ModelSpec& spec, const EffectSizeTable& table,
                                 const std::map<std::string, SamplingCovariance>& matrices,
                                 double zero_disp_jitter = 0.0) {
    if (spec.family != Family::gaussian) throw InputError("Gaussian engine needs family gaussian");
    return GaussianModel(build_design(spec, table, matrices), spec.reml, zero_disp_jitter);
  }

  const DesignBundle& design() const { return design_; }
  const std::vector<CovarianceStructure>& structures() const { return structures_; }
  bool reml() const { return reml_; }
  double zero_disp_jitter() const { return zero_disp_jitter_; }
  int n_theta() const { return n_theta_; }
  int n_delta() const { return static_cast<int>(design_.X_disp.cols()); }
  int n_params() const { return n_theta_ + n_delta(); }
  int theta_offset(std::size_t term) const { return theta_offset_[term]; }
  const std::vector<std::vector<Eigen::Index>>& blocks() const { return blocks_; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t r = 0; r < structures_.size(); ++r)
      for (int k = 0; k < structures_[r].n_params(); ++k)
        out.push_back("theta." + design_.random[r].label + "." + std::to_string(k + 1));
    for (const auto& d : design_.disp_names) out.push_back("disp." + d);
    return out;
  }

  std::vector<Eigen::MatrixXd> materialize_all(const Eigen::VectorXd& params) const {
    std::vector<Eigen::MatrixXd> G;
    for (std::size_t r = 0; r < structures_.size(); ++r)
      G.push_back(structures_[r].materialize(theta_span(params, r)));
    return G;
  }

  Eigen::VectorXd dispersion_variance(const Eigen::VectorXd& params) const {
    const Eigen::Index n = design_.n();
    if (n_delta() == 0) return Eigen::VectorXd::Constant(n, zero_disp_jitter_);
    Eigen::VectorXd lin = design_.X_disp * params.tail(n_delta());
    return (2.0 * lin.array()).exp().matrix();
  }

  // Dense Sigma; the engine itself works block by block.
  Eigen::MatrixXd marginal_covariance(const Eigen::VectorXd& params) const {
    const Eigen::Index n = design_.n();
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n, n);
    auto G = materialize_all(params);
    for (std::size_t r = 0; r < G.size(); ++r) S += term_covariance(design_.random[r], G[r]);
    S.diagonal() += dispersion_variance(params);
    return S;
  }

  std::span<const double> theta_span(const Eigen::VectorXd& params, std::size_t r) const {
    return {params.data() + theta_offset_[r], static_cast<std::size_t>(structures_[r].n_params())};
  }

 private:
  // Rows are joined when any term can give them a nonzero covariance.
  void build_blocks() {
    const Eigen::Index n = design_.n();
    std::vector<Eigen::Index> parent(static_cast<std::size_t>(n));
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](Eigen::Index a) {
      while (parent[a] != a) a = parent[a] = parent[parent[a]];
      return a;
    };
    auto unite = [&](Eigen::Index a, Eigen::Index b) { parent[find(a)] = find(b); };
    for (std::size_t r = 0; r < design_.random.size(); ++r) {
      const auto& rd = design_.random[r];
      const Structure st = rd.term.structure;
      if (st == Structure::equalto || st == Structure::propto) {
        const Eigen::MatrixXd& F = *structures_[r].fixed_matrix();
        std::map<int, std::vector<Eigen::Index>> by_group;
        for (Eigen::Index i = 0; i < n; ++i) by_group[rd.group[i]].push_back(i);
        for (const auto& [g, rows] : by_group)
          for (std::size_t a = 0; a < rows.size(); ++a)
            for (std::size_t b = 0; b < a; ++b)
              if (F(rd.level[rows[a]], rd.level[rows[b]]) != 0.0) unite(rows[a], rows[b]);
      } else {
        const bool all_levels = st == Structure::unstructured;
        std::map<std::pair<int, int>, Eigen::Index> first;
        for (Eigen::Index i = 0; i < n; ++i) {
          std::pair<int, int> key{rd.group[i], all_levels ? 0 : rd.level[i]};
          auto [it, fresh] = first.try_emplace(key, i);
          if (!fresh) unite(i, it->second);
        }
      }
    }
    std::map<Eigen::Index, std::vector<Eigen::Index>> byroot;
    for (Eigen::Index i = 0; i < n; ++i) byroot[find(i)].push_back(i);
    for (auto& kv : byroot) blocks_.push_back(std::move(kv.second));
    std::sort(blocks_.begin(), blocks_.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  }

  DesignBundle design_;
  std::vector<CovarianceStructure> structures_;
  std::vector<int> theta_offset_;
  int n_theta_ = 0;
  bool reml_ = true;
  double zero_disp_jitter_ = 0.0;
  std::vector<std::vector<Eigen::Index>> blocks_;
};

struct GaussianEval {
  double value = std::numeric_limits<double>::infinity();
  bool ok = false;  // false: Sigma or X' Sigma^-1 X not positive definite
  Eigen::VectorXd grad;
  Eigen::VectorXd beta;
  Eigen::MatrixXd beta_cov;
  Eigen::VectorXd alpha;  // Sigma^-1 (y - X beta)
};

// Negative (restricted) log-likelihood with beta profiled out by GLS.
//   ML:   0.5 [ n log 2pi + log|S| + r' S^-1 r ]
//   REML: 0.5 [ (n-p) log 2pi + log|S| + log|X' S^-1 X| + r' S^-1 r ]
// One Cholesky per block of Sigma. `X` may differ from the model's design
// (used when profiling a single coefficient).
inline GaussianEval evaluate(const GaussianModel& m, const Eigen::VectorXd& params, const Eigen::VectorXd& y,
                             const Eigen::MatrixXd& X, bool reml, bool want_grad) {
  GaussianEval out;
  const DesignBundle& d = m.design();
  const Eigen::Index n = d.n();
  const Eigen::Index p = X.cols();
  const auto G = m.materialize_all(params);
  const Eigen::VectorXd Dv = m.dispersion_variance(params);
  const auto& blocks = m.blocks();
  const std::size_t R = G.size();

  std::vector<Eigen::LLT<Eigen::MatrixXd>> chol(blocks.size());
  Eigen::VectorXd Siy(n);
  Eigen::MatrixXd SiX(n, p);
  double logdet = 0.0;

  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& rows = blocks[b];
    const Eigen::Index nb = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(nb, nb);
    for (std::size_t r = 0; r < R; ++r) {
      const auto& rd = d.random[r];
      const Eigen::MatrixXd& Gr = G[r];
      for (Eigen::Index a = 0; a < nb; ++a) {
        const Eigen::Index i = rows[a];
        for (Eigen::Index c = 0; c <= a; ++c) {
          const Eigen::Index j = rows[c];
          if (rd.group[i] == rd.group[j]) S(a, c) += Gr(rd.level[i], rd.level[j]);
        }
      }
    }
    for (Eigen::Index a = 0; a < nb; ++a) S(a, a) += Dv(rows[a]);
    chol[b].compute(S);  // reads the lower triangle only
    if (chol[b].info() != Eigen::Success) return out;
    for (Eigen::Index a = 0; a < nb; ++a) {
      const double l = chol[b].matrixLLT()(a, a);
      if (!(l > 0) || !std::isfinite(l)) return out;
      logdet += 2.0 * std::log(l);
    }
    Siy(rows) = Eigen::VectorXd(chol[b].solve(Eigen::VectorXd(y(rows))));
    if (p > 0) SiX(rows, Eigen::all) = Eigen::MatrixXd(chol[b].solve(Eigen::MatrixXd(X(rows, Eigen::all))));
  }

  Eigen::MatrixXd H = X.transpose() * SiX;
  Eigen::MatrixXd Hinv(p, p);
  double logdetH = 0.0;
  Eigen::LLT<Eigen::MatrixXd> hl;
  if (p > 0) {
    hl.compute(H);
    if (hl.info() != Eigen::Success) return out;
    for (Eigen::Index a = 0; a < p; ++a) logdetH += 2.0 * std::log(hl.matrixLLT()(a, a));
    Hinv = hl.solve(Eigen::MatrixXd::Identity(p, p));
    out.beta = hl.solve(X.transpose() * Siy);
  } else {
    out.beta.resize(0);
  }
  out.beta_cov = Hinv;
  out.alpha = p > 0 ? Eigen::VectorXd(Siy - SiX * out.beta) : Siy;
  const Eigen::VectorXd r = p > 0 ? Eigen::VectorXd(y - X * out.beta) : y;
  const double quad = r.dot(out.alpha);
  if (!std::isfinite(quad) || !std::isfinite(logdet)) return out;

  const double nn = static_cast<double>(n);
  out.value = reml ? 0.5 * ((nn - static_cast<double>(p)) * kLog2Pi + logdet + logdetH + quad)
                   : 0.5 * (nn * kLog2Pi + logdet + quad);
  out.ok = true;

  if (!want_grad) return out;

  // d nll / d phi = 0.5 tr(A dSigma), A = P - alpha alpha' where P = Sigma^-1
  // (ML) or Sigma^-1 - Sigma^-1 X H^-1 X' Sigma^-1 (REML).
  const int np = m.n_params();
  out.grad = Eigen::VectorXd::Zero(np);
  std::vector<Eigen::MatrixXd> M(R);
  for (std::size_t r = 0; r < R; ++r)
    if (m.structures()[r].n_params() > 0) M[r] = Eigen::MatrixXd::Zero(G[r].rows(), G[r].cols());
  Eigen::VectorXd Adiag(n);

  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& rows = blocks[b];
    const Eigen::Index nb = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd A = chol[b].solve(Eigen::MatrixXd::Identity(nb, nb));
    if (reml && p > 0) {
      Eigen::MatrixXd Wb = SiX(rows, Eigen::all);
      A.noalias() -= Wb * Hinv * Wb.transpose();
    }
    Eigen::VectorXd ab = out.alpha(rows);
    A.noalias() -= ab * ab.transpose();
    for (Eigen::Index a = 0; a < nb; ++a) Adiag(rows[a]) = A(a, a);
    for (std::size_t r = 0; r < R; ++r) {
      if (M[r].size() == 0) continue;
      const auto& rd = d.random[r];
      for (Eigen::Index a = 0; a < nb; ++a) {
        const Eigen::Index i = rows[a];
        for (Eigen::Index c = 0; c < nb; ++c) {
          const Eigen::Index j = rows[c];
          if (rd.group[i] == rd.group[j]) M[r](rd.level[i], rd.level[j]) += A(a, c);
        }
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    if (M[r].size() == 0) continue;
    const auto dG = m.structures()[r].jacobian(m.theta_span(params, r));
    const int off = m.theta_offset(r);
    for (std::size_t k = 0; k < dG.size(); ++k) out.grad(off + static_cast<Eigen::Index>(k)) = 0.5 * (M[r].cwiseProduct(dG[k])).sum();
  }
  const int nd = m.n_delta();
  if (nd > 0) {
    const Eigen::VectorXd w = Adiag.cwiseProduct(Dv);  // 0.5 * A_ii * 2 D_i
    out.grad.tail(nd) = d.X_disp.transpose() * w;
  }
  return out;
}

inline GaussianEval evaluate(const GaussianModel& m, const Eigen::VectorXd& params, const Eigen::VectorXd& y,
                             bool want_grad) {
  return evaluate(m, params, y, m.design().X, m.reml(), want_grad);
}

// Optimizer-safe objective: +inf when Sigma is not positive definite.
inline double nll(const GaussianModel& m, const Eigen::VectorXd& params, const Eigen::VectorXd& y,
                  Eigen::VectorXd* grad = nullptr) {
  GaussianEval e = evaluate(m, params, y, grad != nullptr);
  if (grad) *grad = e.ok ? e.grad : Eigen::VectorXd::Zero(m.n_params());
  return e.value;
}

inline Eigen::VectorXd initial_params(const GaussianModel& m, const Eigen::VectorXd& y) {
  double scale = 1.0;
  if (y.size() > 1) {
    const double mean = y.mean();
    const double var = (y.array() - mean).square().sum() / static_cast<double>(y.size() - 1);
    if (var > 0 && std::isfinite(var)) scale = std::sqrt(var);
  }
  Eigen::VectorXd p = Eigen::VectorXd::Zero(m.n_params());
  for (std::size_t r = 0; r < m.structures().size(); ++r) {
    auto th = m.structures()[r].initial_theta(scale);
    for (std::size_t k = 0; k < th.size(); ++k) p(m.theta_offset(r) + static_cast<Eigen::Index>(k)) = th[k];
  }
  const auto& dn = m.design().disp_names;
  for (std::size_t j = 0; j < dn.size(); ++j)
    if (dn[j] == "(Intercept)") p(m.n_theta() + static_cast<Eigen::Index>(j)) = std::log(scale / 2.0);
  return p;
}

struct FitOptions {
  optim::Options optim;
  int restarts = 3;
  bool polish = true;
  unsigned restart_seed = 20240917u;
};

namespace detail {

inline double response_sd(const Eigen::VectorXd& y) {
  if (y.size() < 2) return 1.0;
  const double mean = y.mean();
  const double v = (y.array() - mean).square().sum() / static_cast<double>(y.size() - 1);
  return v > 0 ? std::sqrt(v) : 1.0;
}

inline void fill_components(const GaussianModel& m, FitResult& f, double ysd) {
  const auto& d = m.design();
  const double floor_var = std::max(std::exp(2 * kBoundaryLogSd), std::pow(1e-5 * ysd, 2));
  for (std::size_t r = 0; r < d.random.size(); ++r) {
    const auto& rd = d.random[r];
    f.term_labels.push_back(rd.label);
    f.n_groups[rd.term.group] = rd.n_groups();
    const Structure st = rd.term.structure;
    if (st == Structure::equalto) continue;
    const Eigen::MatrixXd& G = f.G[r];
    if (st == Structure::iid || st == Structure::propto) {
      const double v = std::exp(2.0 * f.theta[r](0));
      f.variance_components.push_back({rd.label, v, v <= floor_var});
      continue;
    }
    for (int a = 0; a < rd.q(); ++a) {
      const double v = G(a, a);
      f.variance_components.push_back({rd.label + ":" + rd.level_names[a], v, v <= floor_var});
    }
    if (st == Structure::unstructured)
      for (int a = 0; a < rd.q(); ++a)
        for (int b = a + 1; b < rd.q(); ++b) {
          const double den = std::sqrt(G(a, a) * G(b, b));
          f.correlations.push_back({rd.label + ":" + rd.level_names[a] + "," + rd.level_names[b],
                                    den > 0 ? G(a, b) / den : 0.0});
        }
  }
  if (m.n_delta() == 0) {
    f.residual_sd = m.zero_disp_jitter() > 0 ? std::sqrt(m.zero_disp_jitter()) : 0.0;
  } else if (m.n_delta() == 1 && d.disp_names[0] == "(Intercept)") {
    f.residual_sd = std::exp(f.delta(0));
    const double v = *f.residual_sd * *f.residual_sd;
    f.variance_components.push_back({"residual", v, v <= floor_var});
  }
}

}  // namespace detail

// Finalizes a FitResult at packed parameters `x`.
inline FitResult finish_fit(const GaussianModel& m, const Eigen::VectorXd& y, const Eigen::VectorXd& x,
                            const optim::Result* opt) {
  FitResult f;
  const auto& d = m.design();
  GaussianEval e = evaluate(m, x, y, true);
  if (!e.ok) throw FitError("covariance matrix not positive definite at the reported optimum");
  f.beta_names = d.x_names;
  f.beta = e.beta;
  f.beta_cov = e.beta_cov;
  f.params = x;
  f.param_names = m.param_names();
  f.delta_names = d.disp_names;
  f.delta = x.tail(m.n_delta());
  f.G = m.materialize_all(x);
  for (std::size_t r = 0; r < m.structures().size(); ++r) {
    auto sp = m.theta_span(x, r);
    f.theta.push_back(Eigen::Map<const Eigen::VectorXd>(sp.data(), static_cast<Eigen::Index>(sp.size())));
  }
  f.nll = e.value;
  f.loglik = -e.value;
  f.reml = m.reml();
  f.n_obs = static_cast<long>(d.n());
  f.grad_norm = m.n_params() > 0 ? e.grad.lpNorm<Eigen::Infinity>() : 0.0;
  if (opt) {
    f.converged = opt->converged;
    f.n_iter = opt->iterations;
    f.message = opt->message;
  } else {
    f.converged = true;
    f.message = "no free variance parameters";
  }
  const int np = m.n_params();
  f.param_cov = Eigen::MatrixXd::Constant(np, np, std::numeric_limits<double>::quiet_NaN());
  if (np > 0) {
    optim::Objective obj = [&](const Eigen::VectorXd& z, Eigen::VectorXd* g) { return nll(m, z, y, g); };
    Eigen::MatrixXd Hs = optim::hessian_from_gradient(obj, x);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Hs);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0).all())
      f.param_cov = ldlt.solve(Eigen::MatrixXd::Identity(np, np));
  }
  for (const auto& s : m.structures())
    if (!s.warning().empty()) f.warnings.push_back(s.warning());
  detail::fill_components(m, f, detail::response_sd(y));
  return f;
}

namespace detail {

// Log-SD parameters whose variance can sit on the zero boundary.
inline std::vector<int> boundary_candidates(const GaussianModel& m) {
  std::vector<int> out;
  for (std::size_t r = 0; r < m.structures().size(); ++r) {
    const Structure k = m.structures()[r].kind();
    if (k == Structure::iid || k == Structure::propto || k == Structure::diag)
      for (int j = 0; j < m.structures()[r].n_params(); ++j) out.push_back(m.theta_offset(r) + j);
  }
  const auto& dn = m.design().disp_names;
  if (dn.size() == 1 && dn[0] == "(Intercept)") out.push_back(m.n_theta());
  return out;
}

// On the log-SD scale a zero variance is only approached asymptotically, and
// the optimizer stops wherever the gradient has flattened out. Each candidate
// is moved to the boundary when that does not raise the objective, and the
// remaining parameters are re-optimized.
inline int snap_to_boundary(const GaussianModel& m, const optim::Objective& obj, optim::Result& best,
                            const optim::Options& o) {
  int iters = 0;
  for (int k : boundary_candidates(m)) {
    if (best.x(k) <= kBoundaryLogSd) continue;
    Eigen::VectorXd x = best.x;
    x(k) = kBoundaryLogSd;
    const double f = obj(x, nullptr);
    if (!(f <= best.f + 1e-9 * std::max(1.0, std::abs(best.f)))) continue;
    optim::Result r = optim::bfgs(obj, x, o);
    iters += r.iterations;
    if (r.converged && r.f <= best.f + 1e-9 * std::max(1.0, std::abs(best.f))) best = std::move(r);
  }
  return iters;
}

}  // namespace detail

// Quasi-Newton fit over packed (theta, delta). Restarts from jittered points
// when the first run does not converge.
inline FitResult fit(const GaussianModel& m, const Eigen::VectorXd& y, const FitOptions& opts = {}) {
  if (y.size() != m.design().n()) throw InputError("response length differs from design");
  if (m.design().n() <= m.design().X.cols()) throw InputError("need more observations than fixed effects");
  if (m.n_params() == 0) {
    GaussianEval e = evaluate(m, Eigen::VectorXd(), y, false);
    if (!e.ok) throw FitError("fixed covariance matrix is not positive definite");
    return finish_fit(m, y, Eigen::VectorXd(), nullptr);
  }
  optim::Objective obj = [&](const Eigen::VectorXd& z, Eigen::VectorXd* g) { return nll(m, z, y, g); };
  const Eigen::VectorXd start = initial_params(m, y);
  if (!std::isfinite(obj(start, nullptr))) throw FitError("initial covariance matrix is not positive definite");

  optim::Result best = optim::bfgs(obj, start, opts.optim);
  int total_iter = best.iterations;
  std::mt19937_64 rng(opts.restart_seed);
  std::normal_distribution<double> jitter(0.0, 0.5);
  for (int k = 0; k < opts.restarts && !best.converged; ++k) {
    Eigen::VectorXd s = start;
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) += jitter(rng);
    if (!std::isfinite(obj(s, nullptr))) continue;
    optim::Result r = optim::bfgs(obj, s, opts.optim);
    total_iter += r.iterations;
    if ((r.converged && !best.converged) || (r.converged == best.converged && r.f < best.f)) best = std::move(r);
  }
  if (opts.polish && best.converged) optim::newton_polish(obj, best);
  if (best.converged) total_iter += detail::snap_to_boundary(m, obj, best, opts.optim);
  best.iterations = total_iter;
  return finish_fit(m, y, best.x, &best);
}

inline FitResult fit(const GaussianModel& m, const FitOptions& opts = {}) { return fit(m, m.design().y, opts); }

// ---------------------------------------------------------------------------
// Profile likelihood intervals
// ---------------------------------------------------------------------------

struct ParamRef {
  enum class Kind { beta, param } kind = Kind::beta;
  int index = 0;  // beta index, or index into the packed (theta, delta) vector

  static ParamRef coefficient(int j) { return {Kind::beta, j}; }
  static ParamRef packed(int k) { return {Kind::param, k}; }
};

struct ProfileInterval {
  double estimate = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  bool lo_wald = false;  // endpoint fell back to Wald
  bool hi_wald = false;
};

inline double chisq1_quantile(double level) {
  // chi^2_1 quantile = z_{(1+level)/2}^2; z via bisection on erfc.
  const double tail = 1.0 - level;
  double lo = 0.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (std::erfc(mid / std::sqrt(2.0)) > tail) lo = mid;
    else hi = mid;
  }
  const double z = 0.5 * (lo + hi);
  return z * z;
}

namespace detail {

// Finds the point where dev(x) crosses `crit` moving from `x0` in direction `dir`.
// Returns nullopt when `limit` is reached first.
template <class Dev>
std::optional<double> find_crossing(Dev&& dev, double x0, double dir, double step, double crit, double limit) {
  double inside = x0;
  double x = x0 + dir * step;
  for (int k = 0; k < 60; ++k) {
    if ((dir > 0 && x >= limit) || (dir < 0 && x <= limit)) {
      if (dev(limit) < crit) return std::nullopt;
      x = limit;
      break;
    }
    if (dev(x) >= crit) break;
    inside = x;
    step *= 1.6;
    x = x0 + dir * step;
    if (k == 59) return std::nullopt;
  }
  double outside = x;
  for (int k = 0; k < 80 && std::abs(outside - inside) > 1e-10 * std::max(1.0, std::abs(inside)); ++k) {
    const double mid = 0.5 * (inside + outside);
    if (dev(mid) < crit) inside = mid;
    else outside = mid;
  }
  return 0.5 * (inside + outside);
}

}  // namespace detail

// Likelihood-ratio interval: endpoints where the profiled deviance rises by
// the chi^2_1 quantile. Coefficients are profiled with the remaining
// coefficients integrated out (REML) or maximized (ML). Variance parameters
// are on the internal log-SD scale; a side that reaches the boundary falls
// back to Wald.
inline ProfileInterval profile_ci(const GaussianModel& m, const FitResult& f, ParamRef target, double level,
                                  const Eigen::VectorXd& y) {
  if (!f.converged) throw FitError("profile_ci needs a converged fit");
  if (!(level > 0 && level < 1)) throw InputError("confidence level must lie in (0, 1)");
  const double crit = chisq1_quantile(level);
  const double z = std::sqrt(crit);
  const int np = m.n_params();
  optim::Options inner;
  inner.gtol = 1e-7;
  ProfileInterval out;

  if (target.kind == ParamRef::Kind::beta) {
    const int j = target.index;
    const Eigen::MatrixXd& X = m.design().X;
    if (j < 0 || j >= X.cols()) throw InputError("coefficient index out of range");
    Eigen::MatrixXd Xr(X.rows(), X.cols() - 1);
    for (Eigen::Index c = 0, k = 0; c < X.cols(); ++c)
      if (c != j) Xr.col(k++) = X.col(c);
    const Eigen::VectorXd xj = X.col(j);

    // Criterion with beta_j fixed at b; the remaining coefficients are profiled or integrated.
    auto crit_at = [&](double b, const Eigen::VectorXd& params, Eigen::VectorXd* grad) {
      GaussianEval e = evaluate(m, params, y - b * xj, Xr, m.reml(), grad != nullptr);
      if (grad) *grad = e.ok ? e.grad : Eigen::VectorXd::Zero(np);
      return std::make_pair(e.value, e);
    };
    // Joint minimum over (b, params).
    optim::Objective joint = [&](const Eigen::VectorXd& z2, Eigen::VectorXd* g) {
      Eigen::VectorXd pg;
      auto [v, e] = crit_at(z2(0), z2.tail(np), g ? &pg : nullptr);
      if (g) {
        g->resize(np + 1);
        (*g)(0) = e.ok ? -xj.dot(e.alpha) : 0.0;
        g->tail(np) = pg;
      }
      return v;
    };
    Eigen::VectorXd z0(np + 1);
    z0(0) = f.beta(j);
    z0.tail(np) = f.params;
    optim::Result ref = optim::bfgs(joint, z0, inner);
    const double fmin = ref.f;
    Eigen::VectorXd warm = ref.x.tail(np);

    auto dev = [&](double b) {
      if (np == 0) return 2.0 * (crit_at(b, Eigen::VectorXd(), nullptr).first - fmin);
      optim::Objective o = [&](const Eigen::VectorXd& pz, Eigen::VectorXd* g) { return crit_at(b, pz, g).first; };
      optim::Result r = optim::bfgs(o, warm, inner);
      if (!std::isfinite(r.f)) r = optim::bfgs(o, ref.x.tail(np), inner);
      return 2.0 * (r.f - fmin);
    };
    const double est = ref.x(0);
    const double se = std::sqrt(f.beta_cov(j, j));
    out.estimate = f.beta(j);
    const double inf = std::numeric_limits<double>::infinity();
    auto lo = detail::find_crossing(dev, est, -1.0, 0.5 * se, crit, -inf);
    auto hi = detail::find_crossing(dev, est, +1.0, 0.5 * se, crit, inf);
    out.lo = lo ? *lo : f.beta(j) - z * se;
    out.hi = hi ? *hi : f.beta(j) + z * se;
    out.lo_wald = !lo;
    out.hi_wald = !hi;
    return out;
  }

  const int k = target.index;
  if (k < 0 || k >= np) throw InputError("parameter index out of range");
  const bool log_sd = k < m.n_theta();
  const double est = f.params(k);
  out.estimate = est;
  double se = std::sqrt(f.param_cov(k, k));
  const double step = std::isfinite(se) && se > 0 ? 0.5 * se : 0.1;

  auto dev = [&](double t) {
    if (np == 1) {
      Eigen::VectorXd pz(1);
      pz(0) = t;
      return 2.0 * (nll(m, pz, y) - f.nll);
    }
    optim::Objective o = [&](const Eigen::VectorXd& rest, Eigen::VectorXd* g) {
      Eigen::VectorXd full(np);
      full << rest.head(k), t, rest.tail(np - k - 1);
      Eigen::VectorXd gf;
      const double v = nll(m, full, y, g ? &gf : nullptr);
      if (g) {
        g->resize(np - 1);
        *g << gf.head(k), gf.tail(np - k - 1);
      }
      return v;
    };
    Eigen::VectorXd start(np - 1);
    start << f.params.head(k), f.params.tail(np - k - 1);
    optim::Result r = optim::bfgs(o, start, inner);
    return 2.0 * (r.f - f.nll);
  };
  const double lower_limit = log_sd ? kBoundaryLogSd : est - 200 * step;
  const double upper_limit = est + 200 * step;
  auto lo = detail::find_crossing(dev, est, -1.0, step, crit, lower_limit);
  auto hi = detail::find_crossing(dev, est, +1.0, step, crit, upper_limit);
  out.lo = lo ? *lo : est - z * se;
  out.hi = hi ? *hi : est + z * se;
  out.lo_wald = !lo;
  out.hi_wald = !hi;
  return out;
}

inline ProfileInterval profile_ci(const GaussianModel& m, const FitResult& f, ParamRef target, double level = 0.95) {
  return profile_ci(m, f, target, level, m.design().y);
}

}  // namespace metafit
