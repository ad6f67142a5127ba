#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "metafit/metafit.hpp"

using namespace metafit;

namespace {

OneStageModel model_of(Family fam, const std::vector<StudyCounts>& s,
                       StudyIntercepts ic = StudyIntercepts::fixed) {
  OneStageModel m;
  m.family = fam;
  m.data.studies = s;
  m.intercepts = ic;
  return m;
}

double max_grad_error(const OneStageModel& m, const Eigen::VectorXd& x) {
  Eigen::VectorXd g;
  laplace_nll(m, x, &g);
  double worst = 0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = 1e-5;
    Eigen::VectorXd a = x, b = x;
    a(k) += h;
    b(k) -= h;
    const double fd = (laplace_nll(m, a) - laplace_nll(m, b)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g(k)) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

double tau2_of(const FitResult& f) { return f.component("tau2")->variance; }

}  // namespace

TEST(ArmLoglik, HandValues) {
  EXPECT_NEAR(arm_loglik(Family::poisson, 0, 1, 0).l, -1.0, 1e-15);
  const double want = std::log(252.0) + 10 * std::log(0.5);
  EXPECT_NEAR(arm_loglik(Family::binomial, 5, 10, 0).l, want, 1e-12);
  EXPECT_NEAR(oracle::arm_ll(true, 5, 10, 0), want, 1e-12);
}

TEST(ArmLoglik, DerivativesMatchFiniteDifferences) {
  for (Family fam : {Family::binomial, Family::poisson, Family::gaussian}) {
    for (double eta : {-3.0, -0.5, 0.0, 1.2}) {
      const double h = 1e-5;
      auto a = arm_loglik(fam, 3, 20, eta), p = arm_loglik(fam, 3, 20, eta + h), m = arm_loglik(fam, 3, 20, eta - h);
      EXPECT_NEAR(a.d1, (p.l - m.l) / (2 * h), 1e-6 * std::max(1.0, std::abs(a.d1)));
      EXPECT_NEAR(a.d2, (p.d1 - m.d1) / (2 * h), 1e-6 * std::max(1.0, std::abs(a.d2)));
      EXPECT_NEAR(a.d3, (p.d2 - m.d2) / (2 * h), 1e-6 * std::max(1.0, std::abs(a.d3)));
    }
  }
}

TEST(JointDensity, WidePriorAtZero) {
  auto m = model_of(Family::binomial, {{"1", 3, 20, 2, 20}});
  Eigen::VectorXd p(3);
  p << -1.0, 0.3, 10.0;  // tau = e^10
  Eigen::VectorXd b = Eigen::VectorXd::Zero(1);
  const double arms = oracle::arm_ll(true, 2, 20, -1.0) + oracle::arm_ll(true, 3, 20, -0.7);
  EXPECT_NEAR(joint_logdensity(m, p, b) - arms, -0.5 * std::log(2 * M_PI * std::exp(20.0)), 1e-10);
}

TEST(Laplace, ExactForGaussianArms) {
  std::vector<StudyCounts> s{{"a", 0.4, 0.05, -0.1, 0.08}, {"b", 1.1, 0.2, 0.3, 0.1}, {"c", -0.2, 0.03, 0.0, 0.04}};
  auto m = model_of(Family::gaussian, s);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(0, 1);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd p(5);
    for (auto& x : p) x = N(rng);
    const double mu = p(3), tau2 = std::exp(2 * p(4));
    double want = 0;
    for (int i = 0; i < 3; ++i) {
      auto lnorm = [](double y, double mean, double var) {
        return -0.5 * (oracle::kLog2Pi + std::log(var) + (y - mean) * (y - mean) / var);
      };
      want -= lnorm(s[i].events_control, p(i), s[i].size_control) +
              lnorm(s[i].events_treatment, p(i) + mu, s[i].size_treatment + tau2);
    }
    EXPECT_NEAR(laplace_nll(m, p), want, 1e-10);
  }
}

TEST(Laplace, CloseToAdaptiveQuadrature) {
  std::mt19937_64 rng(5);
  auto data = oracle::random_arms(true, 5, 0.5, 0.3, rng);
  auto m = oracle::to_model(true, data);
  oracle::GaussHermite gh(20);
  auto f = fit_onestage(m);
  ASSERT_TRUE(f.converged);
  Eigen::VectorXd p(7);
  p << f.beta, f.params;
  const double lap = laplace_nll(m, p), quad = oracle::gh_nll(true, data, p, gh);
  EXPECT_LT(std::abs(lap - quad), 0.05);
}

TEST(Laplace, TinyTauGivesGlm) {
  std::mt19937_64 rng(6);
  for (bool binomial : {true, false}) {
    auto data = oracle::random_arms(binomial, 6, 0.4, 0.0, rng);
    double glm_nll = 0;
    Eigen::VectorXd glm = oracle::glm_fit(binomial, data, &glm_nll);
    // The gap shrinks like tau^2 times the arm information.
    for (auto [tau2, tol] : {std::pair{1e-8, 1e-5}, std::pair{1e-12, 1e-8}}) {
      Eigen::VectorXd p(8);
      p << glm, 0.5 * std::log(tau2);
      EXPECT_NEAR(laplace_nll(oracle::to_model(binomial, data), p), glm_nll, tol);
    }
  }
}

TEST(LaplaceGradient, ImplicitFunctionMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> N(0, 1);
  for (bool binomial : {true, false}) {
    for (StudyIntercepts ic : {StudyIntercepts::fixed, StudyIntercepts::random}) {
      auto data = oracle::random_arms(binomial, 6, 0.3, 0.2, rng);
      auto m = oracle::to_model(binomial, data);
      m.intercepts = ic;
      for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd x = initial_onestage_params(m);
        for (auto& xi : x) xi += 0.5 * N(rng);
        ASSERT_LT(max_grad_error(m, x), 1e-5);
      }
    }
  }
}

TEST(OneStageFit, PoissonTimeScalingShiftsInterceptsOnly) {
  std::mt19937_64 rng(3);
  auto data = oracle::random_arms(false, 8, 0.4, 0.2, rng);
  auto scaled = data;
  const double c = 12.5;
  for (auto& s : scaled) {
    s.nt *= c;
    s.nc *= c;
  }
  auto a = fit_onestage(oracle::to_model(false, data));
  auto b = fit_onestage(oracle::to_model(false, scaled));
  ASSERT_TRUE(a.converged && b.converged);
  EXPECT_NEAR(a.beta(8), b.beta(8), 1e-6);
  EXPECT_NEAR(tau2_of(a), tau2_of(b), 1e-6);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(b.beta(i), a.beta(i) - std::log(c), 1e-5);
}

TEST(OneStageFit, TwoStudyPoissonSymmetry) {
  auto m = model_of(Family::poisson, {{"1", 5, 10, 5, 10}, {"2", 5, 10, 5, 10}});
  auto f = fit_onestage(m);
  ASSERT_TRUE(f.converged);
  EXPECT_NEAR(f.beta(2), 0.0, 1e-6);
}

TEST(OneStageFit, IdenticalStudiesNoEffect) {
  std::vector<StudyCounts> s;
  for (int i = 0; i < 6; ++i) s.push_back({std::to_string(i), 10000, 100000, 10000, 100000});
  auto f = fit_onestage(model_of(Family::binomial, s));
  ASSERT_TRUE(f.converged);
  EXPECT_NEAR(f.beta(6), 0.0, 1e-6);
  EXPECT_TRUE(f.component("tau2")->boundary || tau2_of(f) < 1e-8);
}

TEST(OneStageFit, LargeSamplesApproachTwoStage) {
  std::mt19937_64 rng(13);
  auto data = oracle::random_arms(true, 10, 0.5, 0.1, rng, 100000, 100000);
  auto one = fit_onestage(oracle::to_model(true, data));
  ASSERT_TRUE(one.converged);
  std::vector<double> y, v;
  for (const auto& s : data) {
    const double a = s.yt, b = s.nt - s.yt, c = s.yc, d = s.nc - s.yc;
    y.push_back(std::log(a * d / (b * c)));
    v.push_back(1 / a + 1 / b + 1 / c + 1 / d);
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < y.size(); ++i) ids.push_back(std::to_string(i + 1));
  std::map<std::string, Column> cols{{"g", Column::from_text(std::vector<std::string>(y.size(), "1"))}};
  EffectSizeTable t(ids, ids, y, v, cols, ColumnMap{"yi", "vi", "study", "id"});
  ModelSpec spec = parse_formula("yi ~ 1 + (1|study) + equalto(0 + id|g, V)");
  spec.disp = parse_dispformula("~0");
  auto two = fit(GaussianModel::from_spec(spec, t, {{"V", diag_vcv(t)}}));
  ASSERT_TRUE(two.converged);
  EXPECT_NEAR(one.beta(10), two.beta(0), 0.01);
}

TEST(OneStageFit, LabelSwapApproximatelyNegatesEffect) {
  // With 0/1 treatment coding the random slope sits on the treatment arm only,
  // so swapping labels is an exact symmetry only in the large-sample limit.
  std::mt19937_64 rng(17);
  for (bool binomial : {true, false}) {
    auto data = oracle::random_arms(binomial, 8, 0.4, 0.1, rng, 2000, 4000);
    auto swapped = data;
    for (auto& s : swapped) {
      std::swap(s.yt, s.yc);
      std::swap(s.nt, s.nc);
    }
    auto a = fit_onestage(oracle::to_model(binomial, data));
    auto b = fit_onestage(oracle::to_model(binomial, swapped));
    ASSERT_TRUE(a.converged && b.converged);
    EXPECT_NEAR(a.beta(8), -b.beta(8), 0.02);
    EXPECT_NEAR(tau2_of(a), tau2_of(b), 0.02);
  }
}

TEST(OneStageFit, RandomInterceptVariantRuns) {
  std::mt19937_64 rng(19);
  auto m = oracle::to_model(true, oracle::random_arms(true, 12, 0.5, 0.1, rng));
  m.intercepts = StudyIntercepts::random;
  auto f = fit_onestage(m);
  ASSERT_TRUE(f.converged);
  EXPECT_EQ(f.beta_names, (std::vector<std::string>{"(Intercept)", "treatment"}));
  EXPECT_NE(f.component("study_intercept"), nullptr);
}

TEST(OneStageFit, Errors) {
  auto sep = model_of(Family::binomial, {{"1", 0, 20, 3, 20}, {"2", 0, 30, 4, 30}});
  try {
    fit_onestage(sep);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("separation"), std::string::npos);
  }
  EXPECT_THROW(fit_onestage(model_of(Family::binomial, {{"1", 2, 20, 3, 20}})), InputError);
  EXPECT_THROW(fit_onestage(model_of(Family::binomial, {{"1", 30, 20, 3, 20}, {"2", 1, 20, 3, 20}})), InputError);
  EXPECT_THROW(fit_onestage(model_of(Family::gaussian, {{"1", 1, 1, 0, 1}, {"2", 1, 1, 0, 1}})), InputError);
}
