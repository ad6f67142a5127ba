#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metafit/error.hpp"

namespace metafit {

enum class Structure { iid, diag, unstructured, equalto, propto };

inline const char* to_string(Structure s) {
  switch (s) {
    case Structure::iid: return "iid";
    case Structure::diag: return "diag";
    case Structure::unstructured: return "us";
    case Structure::equalto: return "equalto";
    case Structure::propto: return "propto";
  }
  return "?";
}

// Log-SD values below this are reported as a zero variance on the boundary.
inline constexpr double kBoundaryLogSd = -10.0;

// A parameterized family G(theta) of q x q covariance matrices. Every theta is
// valid: variances are exp(2 theta) and `us` uses a log-Cholesky factor.
//
// Parameter layout:
//   iid, propto   one log-SD
//   diag          q log-SDs
//   us            q log-diagonals of L, then the strictly lower entries of L
//                 column by column
//   equalto       none
class CovarianceStructure {
 public:
  static CovarianceStructure iid(int q) { return CovarianceStructure(Structure::iid, q); }
  static CovarianceStructure diag(int q) { return CovarianceStructure(Structure::diag, q); }
  static CovarianceStructure unstructured(int q) { return CovarianceStructure(Structure::unstructured, q); }

  static CovarianceStructure equalto(Eigen::MatrixXd m) {
    CovarianceStructure s(Structure::equalto, static_cast<int>(m.rows()));
    if (m.rows() != m.cols()) throw InputError("equalto matrix must be square");
    s.fixed_ = std::move(m);
    return s;
  }

  // The fixed matrix is symmetrized; near-singular matrices get a small ridge.
  static CovarianceStructure propto(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols()) throw InputError("propto matrix must be square");
    CovarianceStructure s(Structure::propto, static_cast<int>(m.rows()));
    Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()(0);
    if (lo <= -1e-8) throw InputError("propto matrix is not positive semidefinite");
    if (lo <= 1e-10) {
      const double ridge = 1e-8 * sym.trace() / static_cast<double>(sym.rows());
      sym.diagonal().array() += ridge;
      s.warning_ = "propto matrix is near-singular; added " + std::to_string(ridge) + " to its diagonal";
    }
    s.fixed_ = std::move(sym);
    return s;
  }

  Structure kind() const { return kind_; }
  int dim() const { return q_; }

  int n_params() const {
    switch (kind_) {
      case Structure::iid:
      case Structure::propto: return 1;
      case Structure::diag: return q_;
      case Structure::unstructured: return q_ * (q_ + 1) / 2;
      case Structure::equalto: return 0;
    }
    return 0;
  }

  const std::optional<Eigen::MatrixXd>& fixed_matrix() const { return fixed_; }
  const std::string& warning() const { return warning_; }

  Eigen::MatrixXd cholesky_factor(std::span<const double> theta) const {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q_, q_);
    int k = q_;
    for (int i = 0; i < q_; ++i) L(i, i) = std::exp(theta[i]);
    for (int j = 0; j < q_; ++j)
      for (int i = j + 1; i < q_; ++i) L(i, j) = theta[k++];
    return L;
  }

  Eigen::MatrixXd materialize(std::span<const double> theta) const {
    check_size(theta);
    switch (kind_) {
      case Structure::iid:
        return std::exp(2 * theta[0]) * Eigen::MatrixXd::Identity(q_, q_);
      case Structure::diag: {
        Eigen::VectorXd d(q_);
        for (int i = 0; i < q_; ++i) d(i) = std::exp(2 * theta[i]);
        return d.asDiagonal();
      }
      case Structure::unstructured: {
        Eigen::MatrixXd L = cholesky_factor(theta);
        return L * L.transpose();
      }
      case Structure::equalto: return *fixed_;
      case Structure::propto: return std::exp(2 * theta[0]) * *fixed_;
    }
    return {};
  }

  // dG/dtheta_k for each parameter.
  std::vector<Eigen::MatrixXd> jacobian(std::span<const double> theta) const {
    check_size(theta);
    std::vector<Eigen::MatrixXd> out;
    switch (kind_) {
      case Structure::iid:
      case Structure::propto:
        out.push_back(2 * materialize(theta));
        break;
      case Structure::diag:
        for (int i = 0; i < q_; ++i) {
          Eigen::MatrixXd d = Eigen::MatrixXd::Zero(q_, q_);
          d(i, i) = 2 * std::exp(2 * theta[i]);
          out.push_back(std::move(d));
        }
        break;
      case Structure::unstructured: {
        const Eigen::MatrixXd L = cholesky_factor(theta);
        auto push = [&](int a, int b, double dl) {
          Eigen::MatrixXd dL = Eigen::MatrixXd::Zero(q_, q_);
          dL(a, b) = dl;
          Eigen::MatrixXd t = dL * L.transpose();
          out.push_back(t + t.transpose());
        };
        for (int i = 0; i < q_; ++i) push(i, i, L(i, i));
        for (int j = 0; j < q_; ++j)
          for (int i = j + 1; i < q_; ++i) push(i, j, 1.0);
        break;
      }
      case Structure::equalto: break;
    }
    return out;
  }

  std::vector<double> initial_theta(double data_scale) const {
    const double s = std::log(data_scale / 2.0);
    std::vector<double> th(static_cast<std::size_t>(n_params()), 0.0);
    switch (kind_) {
      case Structure::iid:
      case Structure::propto:
        th[0] = s;
        break;
      case Structure::diag:
      case Structure::unstructured:
        for (int i = 0; i < q_; ++i) th[static_cast<std::size_t>(i)] = s;
        break;
      case Structure::equalto: break;
    }
    return th;
  }

 private:
  CovarianceStructure(Structure k, int q) : kind_(k), q_(q) {
    if (q < 1) throw InputError("covariance structure dimension must be positive");
  }

  void check_size(std::span<const double> theta) const {
    if (static_cast<int>(theta.size()) != n_params())
      throw std::invalid_argument(std::string("wrong parameter count for ") + to_string(kind_));
  }

  Structure kind_;
  int q_;
  std::optional<Eigen::MatrixXd> fixed_;
  std::string warning_;
};

}  // namespace metafit
