#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "metafit/metafit.hpp"

using namespace metafit;

namespace {

double min_eigen(const Eigen::MatrixXd& G) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G, Eigen::EigenvaluesOnly).eigenvalues()(0);
}

Eigen::MatrixXd random_spd(int q, std::mt19937_64& rng) {
  std::normal_distribution<double> N(0, 1);
  Eigen::MatrixXd A(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) A(i, j) = N(rng);
  return A * A.transpose() + 0.1 * Eigen::MatrixXd::Identity(q, q);
}

}  // namespace

TEST(Covstruct, ParameterCounts) {
  EXPECT_EQ(CovarianceStructure::iid(3).n_params(), 1);
  EXPECT_EQ(CovarianceStructure::diag(3).n_params(), 3);
  EXPECT_EQ(CovarianceStructure::unstructured(3).n_params(), 6);
  EXPECT_EQ(CovarianceStructure::equalto(Eigen::MatrixXd::Identity(3, 3)).n_params(), 0);
  EXPECT_EQ(CovarianceStructure::propto(Eigen::MatrixXd::Identity(3, 3)).n_params(), 1);
}

TEST(Covstruct, IidAtZeroIsIdentity) {
  std::vector<double> th{0.0};
  EXPECT_TRUE(CovarianceStructure::iid(3).materialize(th).isIdentity(0.0));
}

TEST(Covstruct, LogCholeskyHandExample) {
  std::vector<double> th{std::log(2.0), std::log(3.0), 0.5};
  Eigen::MatrixXd G = CovarianceStructure::unstructured(2).materialize(th);
  Eigen::Matrix2d want;
  want << 4, 1, 1, 9.25;
  EXPECT_LT((G - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covstruct, EqualtoReturnsMatrixUnchanged) {
  Eigen::MatrixXd V = Eigen::VectorXd::LinSpaced(5, 0.01, 0.05).asDiagonal();
  V(0, 1) = V(1, 0) = 0.003;
  auto s = CovarianceStructure::equalto(V);
  EXPECT_EQ(s.materialize({}), V);
  EXPECT_TRUE(s.jacobian({}).empty());
}

TEST(Covstruct, InitialTheta) {
  auto iid = CovarianceStructure::iid(1).initial_theta(1.0);
  ASSERT_EQ(iid.size(), 1u);
  EXPECT_DOUBLE_EQ(iid[0], std::log(0.5));
  EXPECT_TRUE(CovarianceStructure::equalto(Eigen::MatrixXd::Identity(2, 2)).initial_theta(1.0).empty());
  auto us = CovarianceStructure::unstructured(2).initial_theta(2.0);
  EXPECT_EQ(us, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(CovstructProperty, MaterializeIsSymmetricPsd) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> N(0, 3);
  const Eigen::MatrixXd R = random_spd(4, rng);
  std::vector<CovarianceStructure> kinds{CovarianceStructure::iid(4), CovarianceStructure::diag(4),
                                         CovarianceStructure::unstructured(4), CovarianceStructure::propto(R)};
  for (const auto& s : kinds) {
    for (int rep = 0; rep < 1000; ++rep) {
      std::vector<double> th(s.n_params());
      for (auto& t : th) t = N(rng);
      Eigen::MatrixXd G = s.materialize(th);
      ASSERT_LT((G - G.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      ASSERT_GE(min_eigen(G) / std::max(1.0, G.norm()), -1e-10);
    }
  }
}

TEST(CovstructProperty, LogCholeskyBijection) {
  std::mt19937_64 rng(11);
  for (int q = 1; q <= 5; ++q) {
    auto s = CovarianceStructure::unstructured(q);
    for (int rep = 0; rep < 100; ++rep) {
      Eigen::MatrixXd G = random_spd(q, rng);
      Eigen::MatrixXd back = s.materialize(oracle::theta_from_matrix(G));
      ASSERT_LT((back - G).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, G.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(CovstructProperty, ProptoIdentityIsIid) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0, 2);
  auto p = CovarianceStructure::propto(Eigen::MatrixXd::Identity(3, 3));
  auto i = CovarianceStructure::iid(3);
  EXPECT_TRUE(p.warning().empty());
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> th{N(rng)};
    ASSERT_EQ(p.materialize(th), i.materialize(th));
  }
}

TEST(Covstruct, ProptoRidgeOnSingularMatrix) {
  Eigen::MatrixXd M = Eigen::MatrixXd::Ones(3, 3);  // rank one, PSD
  auto s = CovarianceStructure::propto(M);
  EXPECT_FALSE(s.warning().empty());
  EXPECT_GT(min_eigen(*s.fixed_matrix()), 0.0);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -1;
  EXPECT_THROW(CovarianceStructure::propto(bad), InputError);
}

TEST(CovstructProperty, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N(0, 1);
  std::vector<CovarianceStructure> kinds{CovarianceStructure::iid(2), CovarianceStructure::diag(3),
                                         CovarianceStructure::unstructured(3),
                                         CovarianceStructure::propto(random_spd(3, rng))};
  for (const auto& s : kinds) {
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> th(s.n_params());
      for (auto& t : th) t = N(rng);
      auto J = s.jacobian(th);
      ASSERT_EQ(static_cast<int>(J.size()), s.n_params());
      for (int k = 0; k < s.n_params(); ++k) {
        auto a = th, b = th;
        const double h = 1e-6;
        a[k] += h;
        b[k] -= h;
        Eigen::MatrixXd fd = (s.materialize(a) - s.materialize(b)) / (2 * h);
        ASSERT_LT((fd - J[k]).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, J[k].cwiseAbs().maxCoeff()));
      }
    }
  }
}
