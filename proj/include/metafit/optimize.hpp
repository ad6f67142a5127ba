#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

namespace metafit::optim {

// Objective: returns f(x) and, when `grad` is non-null, writes the gradient.
// Returning +inf marks x as infeasible.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct Options {
  int max_iter = 500;
  double gtol = 1e-6;       // infinity norm of the gradient
  double ftol_rel = 1e-10;  // relative change of f between iterations
  double max_step = 5.0;    // cap on the first trial step length (in x units)
};

struct Result {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

inline Eigen::VectorXd central_gradient(const Objective& f, const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    xp(i) = xi + h;
    const double fp = f(xp, nullptr);
    xp(i) = xi - h;
    const double fm = f(xp, nullptr);
    xp(i) = xi;
    g(i) = (fp - fm) / (2 * h);
  }
  return g;
}

// Wraps a value-only function into an Objective with central-difference gradients.
inline Objective with_numeric_gradient(std::function<double(const Eigen::VectorXd&)> fn, double h = 1e-5) {
  return [fn = std::move(fn), h](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    const double v = fn(x);
    if (grad) {
      Objective plain = [&fn](const Eigen::VectorXd& z, Eigen::VectorXd*) { return fn(z); };
      *grad = central_gradient(plain, x, h);
    }
    return v;
  };
}

// Hessian by central differences of the gradient, symmetrized.
inline Eigen::MatrixXd hessian_from_gradient(const Objective& f, const Eigen::VectorXd& x, double h = 1e-4) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd gp(n), gm(n);
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double xi = x(i);
    xp(i) = xi + h;
    f(xp, &gp);
    xp(i) = xi - h;
    f(xp, &gm);
    xp(i) = xi;
    H.col(i) = (gp - gm) / (2 * h);
  }
  return 0.5 * (H + H.transpose());
}

namespace detail {

struct Point {
  double a, f, d;  // step, value, directional derivative
};

inline double cubic_min(const Point& lo, const Point& hi) {
  const double d1 = lo.d + hi.d - 3 * (lo.f - hi.f) / (lo.a - hi.a);
  const double disc = d1 * d1 - lo.d * hi.d;
  if (disc < 0) return 0.5 * (lo.a + hi.a);
  const double d2 = std::copysign(std::sqrt(disc), hi.a - lo.a);
  const double a = hi.a - (hi.a - lo.a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2 * d2);
  const double lo_b = std::min(lo.a, hi.a), hi_b = std::max(lo.a, hi.a);
  const double margin = 0.1 * (hi_b - lo_b);
  if (!std::isfinite(a) || a < lo_b + margin || a > hi_b - margin) return 0.5 * (lo.a + hi.a);
  return a;
}

}  // namespace detail

// BFGS with a strong-Wolfe line search.
inline Result bfgs(const Objective& fn, Eigen::VectorXd x0, const Options& opt = {}) {
  constexpr double c1 = 1e-4, c2 = 0.9;
  const Eigen::Index n = x0.size();
  Result res;
  res.x = std::move(x0);
  res.grad.resize(n);
  res.f = fn(res.x, &res.grad);
  ++res.evaluations;
  if (!std::isfinite(res.f)) {
    res.message = "objective is not finite at the starting point";
    return res;
  }
  if (n == 0) {
    res.converged = true;
    res.message = "no free parameters";
    return res;
  }

  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd g_new(n), x_new(n);
  int stalls = 0;

  for (res.iterations = 0; res.iterations < opt.max_iter; ++res.iterations) {
    if (res.grad.lpNorm<Eigen::Infinity>() < opt.gtol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      return res;
    }
    Eigen::VectorXd p = -Hinv * res.grad;
    double dphi0 = res.grad.dot(p);
    if (!(dphi0 < 0)) {
      Hinv.setIdentity();
      p = -res.grad;
      dphi0 = res.grad.dot(p);
    }

    double a1 = 1.0;
    const double pn = p.lpNorm<Eigen::Infinity>();
    if (res.iterations == 0 && pn > 0) a1 = std::min(1.0, 1.0 / pn);
    if (pn * a1 > opt.max_step) a1 = opt.max_step / pn;

    auto eval = [&](double a, Eigen::VectorXd& g) {
      x_new = res.x + a * p;
      const double f = fn(x_new, &g);
      ++res.evaluations;
      return f;
    };

    const detail::Point p0{0.0, res.f, dphi0};
    detail::Point prev = p0;
    detail::Point found{0, 0, 0};
    bool ok = false;
    double a = a1;

    auto zoom = [&](detail::Point lo, detail::Point hi) {
      for (int k = 0; k < 40; ++k) {
        const double aj = detail::cubic_min(lo, hi);
        const double fj = eval(aj, g_new);
        if (!std::isfinite(fj) || fj > p0.f + c1 * aj * p0.d || fj >= lo.f) {
          hi = {aj, std::isfinite(fj) ? fj : std::numeric_limits<double>::max(), std::isfinite(fj) ? g_new.dot(p) : 0.0};
          if (!std::isfinite(fj)) hi.d = std::abs(lo.d) + 1.0;
        } else {
          const double dj = g_new.dot(p);
          if (std::abs(dj) <= -c2 * p0.d) {
            found = {aj, fj, dj};
            return true;
          }
          if (dj * (hi.a - lo.a) >= 0) hi = lo;
          lo = {aj, fj, dj};
        }
        if (std::abs(hi.a - lo.a) < 1e-16 * std::max(1.0, std::abs(lo.a))) break;
      }
      // Accept any decrease found.
      if (lo.a > 0 && lo.f < p0.f) {
        const double fl = eval(lo.a, g_new);
        found = {lo.a, fl, g_new.dot(p)};
        return true;
      }
      return false;
    };

    for (int k = 0; k < 30; ++k) {
      const double fa = eval(a, g_new);
      if (!std::isfinite(fa)) {
        a *= 0.25;
        continue;
      }
      const double da = g_new.dot(p);
      const detail::Point cur{a, fa, da};
      if (fa > p0.f + c1 * a * p0.d || (k > 0 && fa >= prev.f)) {
        ok = zoom(prev, cur);
        break;
      }
      if (std::abs(da) <= -c2 * p0.d) {
        found = cur;
        ok = true;
        break;
      }
      if (da >= 0) {
        ok = zoom(cur, prev);
        break;
      }
      prev = cur;
      a *= 2.0;
    }

    if (!ok) {
      // A failed search from a reset direction means no further progress is possible.
      if (Hinv.isIdentity()) {
        res.message = "line search failed";
        res.converged = res.grad.lpNorm<Eigen::Infinity>() < std::sqrt(opt.gtol);
        return res;
      }
      Hinv.setIdentity();
      continue;
    }

    // x_new / g_new hold the accepted point.
    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd yv = g_new - res.grad;
    const double f_old = res.f;
    res.x = x_new;
    res.f = found.f;
    res.grad = g_new;

    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (res.iterations == 0) Hinv *= sy / yv.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }

    const double rel = std::abs(f_old - res.f) / std::max(1.0, std::abs(res.f));
    if (rel < opt.ftol_rel) {
      // The objective stopped moving; accept when the gradient is small in a looser sense.
      if (++stalls >= 3 && res.grad.lpNorm<Eigen::Infinity>() < std::sqrt(opt.gtol)) {
        res.converged = true;
        res.message = "relative function tolerance reached";
        ++res.iterations;
        return res;
      }
    } else {
      stalls = 0;
    }
  }
  res.converged = res.grad.lpNorm<Eigen::Infinity>() < opt.gtol;
  res.message = res.converged ? "gradient tolerance reached" : "iteration limit reached";
  return res;
}

// Newton steps with a finite-difference Hessian; used to tighten a BFGS optimum.
inline void newton_polish(const Objective& fn, Result& r, int steps = 4) {
  if (r.x.size() == 0) return;
  for (int k = 0; k < steps; ++k) {
    if (r.grad.lpNorm<Eigen::Infinity>() < 1e-11) return;
    Eigen::MatrixXd H = hessian_from_gradient(fn, r.x);
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) return;
    Eigen::VectorXd step = -llt.solve(r.grad);
    if (!step.allFinite() || step.lpNorm<Eigen::Infinity>() > 1.0) return;
    Eigen::VectorXd g(r.x.size());
    Eigen::VectorXd xn = r.x + step;
    const double fnew = fn(xn, &g);
    ++r.evaluations;
    if (!std::isfinite(fnew) || fnew > r.f + 1e-12 * std::max(1.0, std::abs(r.f)) ||
        g.lpNorm<Eigen::Infinity>() > r.grad.lpNorm<Eigen::Infinity>())
      return;
    r.x = xn;
    r.f = fnew;
    r.grad = g;
  }
}

}  // namespace metafit::optim
