#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "metafit/metafit.hpp"

namespace testing_helpers {

using namespace metafit;

// Table with columns yi, vi, study, id, g (constant) and any extra text columns.
inline EffectSizeTable make_table(const std::vector<double>& y, const std::vector<double>& v,
                                  std::vector<std::string> study = {},
                                  std::map<std::string, std::vector<std::string>> extra = {}) {
  const std::size_t n = y.size();
  std::vector<std::string> obs;
  for (std::size_t i = 0; i < n; ++i) obs.push_back(std::to_string(i + 1));
  if (study.empty()) study = obs;
  std::map<std::string, Column> cols;
  cols.emplace("g", Column::from_text(std::vector<std::string>(n, "1")));
  for (auto& [name, text] : extra) cols.emplace(name, Column::from_text(text));
  return EffectSizeTable(obs, study, y, v, std::move(cols), ColumnMap{"yi", "vi", "study", "id"});
}

inline GaussianModel make_model(const std::string& formula, const std::string& disp, const EffectSizeTable& t,
                                std::map<std::string, SamplingCovariance> mats = {}, bool reml = true) {
  ModelSpec spec = parse_formula(formula);
  spec.disp = parse_dispformula(disp);
  spec.reml = reml;
  if (!mats.count("V")) mats.emplace("V", diag_vcv(t));
  return GaussianModel(build_design(spec, t, mats), reml);
}

inline std::vector<std::string> to_text(const std::vector<double>& x) {
  std::vector<std::string> out;
  for (double v : x) out.push_back(csv::format_number(v, 17));
  return out;
}

// Multilevel data: `k` clusters with 2-5 rows each.
struct Multilevel {
  std::vector<double> y, v;
  std::vector<std::string> study;
};

inline Multilevel random_multilevel(std::mt19937_64& rng, int k, double mu = 0.3, double tau2 = 0.1,
                                    double sigma2 = 0.05) {
  std::normal_distribution<double> N(0, 1);
  std::uniform_int_distribution<int> m(2, 5);
  std::uniform_real_distribution<double> vd(0.01, 0.1);
  Multilevel d;
  for (int j = 0; j < k; ++j) {
    const double u = std::sqrt(tau2) * N(rng);
    const int rows = m(rng);
    for (int r = 0; r < rows; ++r) {
      const double v = vd(rng);
      d.v.push_back(v);
      d.y.push_back(mu + u + std::sqrt(sigma2) * N(rng) + std::sqrt(v) * N(rng));
      d.study.push_back("s" + std::to_string(j + 1));
    }
  }
  return d;
}

}  // namespace testing_helpers
