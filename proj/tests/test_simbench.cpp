#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"
#include "metafit/metafit.hpp"

using namespace metafit;
using namespace metafit::sim;

TEST(Philox, KnownAnswerVectors) {
  using P = Philox4x32;
  EXPECT_EQ(P::block({0, 0, 0, 0}, {0, 0}), (P::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(P::block({~0u, ~0u, ~0u, ~0u}, {~0u, ~0u}),
            (P::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(P::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (P::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, StreamsAreReproducibleAndDistinct) {
  Philox4x32 a(1, 5), b(1, 5), c(1, 6);
  std::vector<std::uint32_t> xa, xb, xc;
  for (int i = 0; i < 64; ++i) {
    xa.push_back(a());
    xb.push_back(b());
    xc.push_back(c());
  }
  EXPECT_EQ(xa, xb);
  EXPECT_NE(xa, xc);
  Philox4x32 u(3, 0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    ASSERT_GE(x, 0.0);
    ASSERT_LT(x, 1.0);
  }
}

TEST(Generate, SameReplicateTwiceIsIdentical) {
  for (Measure m : {Measure::SMD, Measure::lnRR, Measure::lnOR, Measure::lnIRR}) {
    SimConfig cfg;
    cfg.measure = m;
    cfg.tau2 = 0.1;
    cfg.seed = 99;
    auto a = generate(cfg, 17), b = generate(cfg, 17), c = generate(cfg, 18);
    EXPECT_EQ(a.table.y(), b.table.y());
    EXPECT_EQ(a.table.v(), b.table.v());
    EXPECT_NE(a.table.y(), c.table.y());
    EXPECT_EQ(a.arms.has_value(), m == Measure::lnOR || m == Measure::lnIRR);
  }
}

TEST(Generate, NoHeterogeneityHugeSamples) {
  for (Measure m : {Measure::SMD, Measure::lnRR, Measure::lnOR, Measure::lnIRR}) {
    SimConfig cfg;
    cfg.measure = m;
    cfg.n_min = cfg.n_max = 1000000;
    auto d = generate(cfg, 0);
    for (double y : d.table.y()) EXPECT_NEAR(y, 0.0, 0.02) << to_string(m);
  }
}

TEST(Generate, OddsRatioCentredOnTruth) {
  SimConfig cfg;
  cfg.measure = Measure::lnOR;
  cfg.mu = std::log(2.0);
  cfg.k = 10000;
  cfg.n_min = 200;
  cfg.n_max = 400;
  auto d = generate(cfg, 0);
  EXPECT_NEAR(oracle::mean(d.table.y()), std::log(2.0), 0.01);
}

TEST(Reference, MatchesGridSearch) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> N(0, 1);
  std::uniform_real_distribution<double> U(0.01, 0.2);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> y(12), v(12);
    for (int i = 0; i < 12; ++i) {
      v[i] = U(rng);
      y[i] = N(rng) * std::sqrt(v[i] + 0.1);
    }
    auto r = reference_reml(y, v);
    EXPECT_NEAR(r.tau2, oracle::grid_reml_tau2(y, v, 1e-4, 2.0), 1e-4);
  }
}

TEST(Aggregate, PermutationInvariant) {
  SimConfig cfg;
  cfg.k = 8;
  cfg.tau2 = 0.1;
  cfg.mu = 0.5;
  cfg.n_reps = 40;
  std::vector<RepResult> reps;
  for (int r = 0; r < cfg.n_reps; ++r) reps.push_back(run_rep(cfg, r));
  auto a = aggregate(cfg, reps);
  std::mt19937_64 rng(1);
  std::shuffle(reps.begin(), reps.end(), rng);
  auto b = aggregate(cfg, reps);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].bias, b[0].bias);
  EXPECT_EQ(a[0].rmse, b[0].rmse);
  EXPECT_EQ(a[0].coverage, b[0].coverage);
  EXPECT_EQ(a[0].ci_width, b[0].ci_width);
}

TEST(Run, EmptyModelSetGivesEmptyReport) {
  SimConfig cfg;
  cfg.models.clear();
  cfg.n_reps = 5;
  EXPECT_TRUE(run(cfg, 1).rows.empty());
  cfg.models = {Model::BN};  // BN does not apply to SMD
  EXPECT_TRUE(run(cfg, 1).rows.empty());
}

TEST(Run, ThreadCountDoesNotChangeReport) {
  SimConfig cfg;
  cfg.measure = Measure::lnOR;
  cfg.models = {Model::NN, Model::BN};
  cfg.tau2 = 0.1;
  cfg.n_reps = 12;
  std::ostringstream a, b;
  write_csv(a, run(cfg, 1));
  write_csv(b, run(cfg, 3));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Run, TwoStageBiasWithinMonteCarloError) {
  SimConfig cfg;
  cfg.k = 30;
  cfg.tau2 = 0.1;
  cfg.mu = 0.5;
  cfg.n_reps = 1000;
  auto r = run(cfg);
  ASSERT_EQ(r.rows.size(), 1u);
  const auto& row = r.rows[0];
  EXPECT_GE(row.convergence_rate, 0.99);
  EXPECT_LE(std::abs(row.bias), 3 * row.bias_mcse);
  ASSERT_TRUE(row.agreement.has_value());
  EXPECT_EQ(row.agreement->agreeing, row.agreement->compared);
}

TEST(Run, TypeOneErrorStableAcrossSeeds) {
  SimConfig cfg;
  cfg.k = 10;
  cfg.n_reps = 400;
  cfg.seed = 1;
  auto a = run(cfg).rows.at(0);
  cfg.seed = 2;
  auto b = run(cfg).rows.at(0);
  EXPECT_EQ(a.rejection_kind(), std::string("type1"));
  // two independent binomial estimates of one rate
  const double p = 0.5 * (a.rejection_rate + b.rejection_rate);
  const double se = std::sqrt(2 * p * (1 - p) / 400.0);
  EXPECT_LE(std::abs(a.rejection_rate - b.rejection_rate), 4 * std::max(se, 1.0 / 400));
}

TEST(GridConfig, ParsesAndRejects) {
  std::istringstream in("# grid\nmeasures = SMD, lnOR\nk = 10\ntau2 = 0, 0.2\nmodels = NN, BN\nreps = 50\nseed = 3\n");
  auto g = parse_grid_config(in);
  EXPECT_EQ(g.measures, (std::vector<Measure>{Measure::SMD, Measure::lnOR}));
  EXPECT_EQ(g.ks, std::vector<int>{10});
  EXPECT_EQ(g.base.n_reps, 50);
  EXPECT_EQ(expand(g).size(), 2u * 2u * 2u);
  std::istringstream bad("reps = 0\n");
  auto gb = parse_grid_config(bad);
  EXPECT_THROW(expand(gb).front().validate(), InputError);
  std::istringstream unknown("colour = blue\n");
  EXPECT_THROW(parse_grid_config(unknown), InputError);
}

TEST(GridConfig, DefaultGridHasFourMeasures) {
  auto cfgs = expand(default_grid());
  std::set<Measure> seen;
  for (const auto& c : cfgs) seen.insert(c.measure);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(cfgs.size(), 4u * 2u * 3u * 2u);
}
