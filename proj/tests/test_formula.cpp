#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "metafit/metafit.hpp"

using namespace metafit;
using testing_helpers::make_table;

TEST(ParseFormula, MultilevelListing) {
  auto s = parse_formula("yi ~ 1 + (1|study) + equalto(0 + id|g,V)");
  EXPECT_EQ(s.response, "yi");
  EXPECT_TRUE(s.fixed.intercept);
  EXPECT_TRUE(s.fixed.terms.empty());
  ASSERT_EQ(s.random.size(), 2u);
  EXPECT_EQ(s.random[0], (RandomTerm{Structure::iid, "", "study", std::nullopt}));
  EXPECT_EQ(s.random[1], (RandomTerm{Structure::equalto, "id", "g", std::string("V")}));
}

TEST(ParseFormula, BivariateListing) {
  auto s = parse_formula("yi ~ group + (0 + group|study) + equalto(0 + obs|g,VCV)");
  EXPECT_TRUE(s.fixed.intercept);
  EXPECT_EQ(s.fixed.terms, std::vector<std::string>{"group"});
  ASSERT_EQ(s.random.size(), 2u);
  EXPECT_EQ(s.random[0].structure, Structure::unstructured);
  EXPECT_EQ(s.random[0].factor, "group");
  EXPECT_EQ(s.random[1].matrix, std::optional<std::string>("VCV"));
}

TEST(ParseFormula, TruncatedInputReportsOffset) {
  try {
    parse_formula("yi ~");
    FAIL();
  } catch (const FormulaError& e) {
    EXPECT_EQ(e.offset(), 5u);
    EXPECT_NE(std::string(e.what()).find("offset 5"), std::string::npos);
  }
}

TEST(ParseFormula, Errors) {
  EXPECT_THROW(parse_formula("yi ~ 1 + ar1(1|g)"), FormulaError);
  EXPECT_THROW(parse_formula("yi ~ 1 + equalto(0+id|g,V) + equalto(0+id|g,W)"), FormulaError);
  EXPECT_THROW(parse_formula("yi ~ 1 + equalto(0+id|g)"), FormulaError);
  EXPECT_THROW(parse_formula("yi ~ 1 + (1|g, V)"), FormulaError);
  EXPECT_THROW(parse_formula("yi ~ a - 2"), FormulaError);
  EXPECT_THROW(parse_formula("yi ~ a + a"), FormulaError);
  EXPECT_THROW(parse_formula("~ a"), FormulaError);
}

TEST(ParseFormula, MinusOneRemovesIntercept) {
  auto s = parse_formula("yi ~ Nfixing - 1 + (1 | experiment) + propto(0 + species|g, phylo.cor)");
  EXPECT_FALSE(s.fixed.intercept);
  EXPECT_EQ(s.fixed.terms, std::vector<std::string>{"Nfixing"});
  EXPECT_EQ(s.random[1].structure, Structure::propto);
  EXPECT_EQ(s.random[1].matrix, std::optional<std::string>("phylo.cor"));
}

TEST(ParseDispformula, Forms) {
  EXPECT_TRUE(parse_dispformula("~0").zero());
  auto ni = parse_dispformula("~ ni");
  EXPECT_TRUE(ni.intercept);
  EXPECT_EQ(ni.terms, std::vector<std::string>{"ni"});
  auto one = parse_dispformula("~1");
  EXPECT_TRUE(one.intercept);
  EXPECT_TRUE(one.terms.empty());
  EXPECT_THROW(parse_dispformula("~ 1 + (1|study)"), FormulaError);
  EXPECT_THROW(parse_dispformula("~ diag(1|study)"), FormulaError);
}

// Generator of grammar-valid formulas for the round-trip property.
namespace {

std::string random_formula(std::mt19937_64& rng) {
  const char* idents[] = {"a", "b2", "x_y", "grp", "study", "id", "V", "M.cor"};
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
  auto id = [&] { return std::string(idents[pick(8)]); };
  std::string s = id() + " ~ ";
  std::vector<std::string> used;
  auto fresh = [&] {
    for (;;) {
      std::string c = id();
      if (std::find(used.begin(), used.end(), c) == used.end()) {
        used.push_back(c);
        return c;
      }
    }
  };
  switch (pick(4)) {
    case 0: s += "0"; break;
    case 1: s += "1"; break;
    case 2: {
      const int n = 1 + pick(3);
      for (int i = 0; i < n; ++i) s += (i ? " + " : "") + fresh();
      break;
    }
    default: s += fresh() + " - 1"; break;
  }
  bool eq = false;
  const int nr = pick(4);
  for (int r = 0; r < nr; ++r) {
    const std::string lhs = pick(2) ? "1" : "0 + " + id();
    switch (pick(5)) {
      case 0: s += " + (" + lhs + "|" + id() + ")"; break;
      case 1: s += " + diag(" + lhs + "|" + id() + ")"; break;
      case 2: s += " + us(" + lhs + "|" + id() + ")"; break;
      case 3: s += " + propto(" + lhs + "|" + id() + ", " + id() + ")"; break;
      default:
        if (!eq) s += " + equalto(" + lhs + "|" + id() + "," + id() + ")";
        eq = true;
        break;
    }
  }
  return s;
}

}  // namespace

TEST(ParseFormulaProperty, PrettyPrintRoundTrip) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 2000; ++i) {
    const std::string text = random_formula(rng);
    ModelSpec a = parse_formula(text);
    ModelSpec b = parse_formula(to_string(a));
    ASSERT_EQ(a, b) << text << " -> " << to_string(a);
  }
}

TEST(BuildDesign, InterceptOnlyMultilevel) {
  std::vector<std::string> study{"1", "1", "2", "3", "3", "3"};
  auto t = make_table({1, 2, 3, 4, 5, 6}, {1, 1, 1, 1, 1, 1}, study);
  std::map<std::string, SamplingCovariance> m{{"V", diag_vcv(t)}};
  auto d = build_design(parse_formula("yi ~ 1 + (1|study) + equalto(0 + id|g, V)"), t, m);
  EXPECT_EQ(d.X.rows(), 6);
  EXPECT_EQ(d.X.cols(), 1);
  ASSERT_EQ(d.random.size(), 2u);
  Eigen::MatrixXd Z = dense_z(d.random[0]);
  EXPECT_EQ(Z.cols(), 3);
  EXPECT_TRUE((Z.rowwise().sum().array() == 1.0).all());
  Eigen::MatrixXd Zi = dense_z(d.random[1]);
  EXPECT_TRUE(Zi.isIdentity());
  EXPECT_EQ(d.random[1].label, "V");
  EXPECT_EQ(d.random[0].label, "study");
}

TEST(BuildDesign, CellMeansCoding) {
  auto t = make_table({1, 2, 3, 4}, {1, 1, 1, 1}, {}, {{"Nfixing", {"yes", "no", "yes", "no"}}});
  auto d = build_design(parse_formula("yi ~ Nfixing - 1"), t, {});
  ASSERT_EQ(d.X.cols(), 2);
  EXPECT_EQ(d.x_names, (std::vector<std::string>{"Nfixingno", "Nfixingyes"}));
  EXPECT_EQ(d.X(0, 1), 1.0);
  EXPECT_EQ(d.X(1, 0), 1.0);
  auto tc = build_design(parse_formula("yi ~ Nfixing"), t, {});
  EXPECT_EQ(tc.x_names, (std::vector<std::string>{"(Intercept)", "Nfixingyes"}));
}

TEST(BuildDesign, SingleLevelGroupGivesVItself) {
  auto t = make_table({1, 2, 3}, {0.5, 0.6, 0.7}, {"a", "a", "b"});
  auto V = vcalc_constant_rho(t, 0.5);
  auto d = build_design(parse_formula("yi ~ 1 + equalto(0 + id|g, V)"), t, {{"V", V}});
  Eigen::MatrixXd C = term_covariance(d.random[0], *d.random[0].fixed_matrix);
  EXPECT_TRUE(C.isApprox(V.matrix, 0.0));
}

TEST(BuildDesign, TwoLevelEqualtoGroupIsBlockDiagonal) {
  // Two groups, each carrying the same 2x2 matrix.
  auto t = make_table({1, 2, 3, 4}, {1, 1, 1, 1}, {}, {{"grp", {"A", "A", "B", "B"}}, {"pos", {"p", "q", "p", "q"}}});
  SamplingCovariance M;
  M.matrix = (Eigen::Matrix2d() << 2, 0.5, 0.5, 3).finished();
  M.labels = {"p", "q"};
  auto d = build_design(parse_formula("yi ~ 1 + propto(0 + pos|grp, M)"), t, {{"M", M}});
  Eigen::MatrixXd C = term_covariance(d.random[0], *d.random[0].fixed_matrix);
  EXPECT_TRUE(C.block(0, 0, 2, 2).isApprox(M.matrix));
  EXPECT_TRUE(C.block(2, 2, 2, 2).isApprox(M.matrix));
  EXPECT_TRUE(C.block(0, 2, 2, 2).isZero());
}

TEST(BuildDesign, Errors) {
  auto t = make_table({1, 2, 3}, {1, 1, 1}, {}, {{"z", {"1", "1", "1"}}, {"m", {"1", "NA", "2"}}});
  try {
    build_design(parse_formula("yi ~ 1 + equalto(0 + id|g, V)"), t, {});
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("matrix V unbound"), std::string::npos);
  }
  EXPECT_THROW(build_design(parse_formula("yi ~ 1 + z"), t, {}), InputError);       // rank deficient
  EXPECT_THROW(build_design(parse_formula("yi ~ 1 + m"), t, {}), InputError);       // missing moderator
  EXPECT_THROW(build_design(parse_formula("yi ~ 1 + nothere"), t, {}), InputError);  // unknown column
  SamplingCovariance small;
  small.matrix = Eigen::MatrixXd::Identity(2, 2);
  small.labels = {"1", "2"};
  EXPECT_THROW(build_design(parse_formula("yi ~ 1 + equalto(0 + id|g, V)"), t, {{"V", small}}), InputError);
  // equalto factor that does not enumerate observations
  EXPECT_THROW(build_design(parse_formula("yi ~ 1 + equalto(0 + z|g, W)"), t,
                            {{"W", SamplingCovariance{Eigen::MatrixXd::Identity(1, 1), {"1"}, {}}}}),
               InputError);
}
