#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "metafit/covstruct.hpp"
#include "metafit/data.hpp"
#include "metafit/error.hpp"

namespace metafit {

enum class Family { gaussian, binomial, poisson };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::binomial: return "binomial";
    case Family::poisson: return "poisson";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "gaussian") return Family::gaussian;
  if (s == "binomial") return Family::binomial;
  if (s == "poisson") return Family::poisson;
  throw InputError("unknown family '" + s + "' (expected gaussian, binomial or poisson)");
}

// Fixed-effect part of a formula. `intercept == false` with no terms is the zero formula.
struct FixedFormula {
  bool intercept = true;
  std::vector<std::string> terms;

  bool zero() const { return !intercept && terms.empty(); }
  bool operator==(const FixedFormula&) const = default;
};

struct RandomTerm {
  Structure structure = Structure::iid;
  std::string factor;                 // empty: intercept-only left-hand side
  std::string group;
  std::optional<std::string> matrix;  // equalto and propto only

  bool operator==(const RandomTerm&) const = default;
};

struct ModelSpec {
  std::string response;
  FixedFormula fixed;
  std::vector<RandomTerm> random;
  FixedFormula disp;  // defaults to ~1
  Family family = Family::gaussian;
  bool reml = true;

  bool operator==(const ModelSpec&) const = default;
};

namespace detail {

// Recursive-descent parser over the formula subset. Error positions are
// 1-based byte positions; end of input reports size() + 1.
class FormulaParser {
 public:
  explicit FormulaParser(std::string_view s) : s_(s) {}

  ModelSpec model() {
    ModelSpec spec;
    spec.response = ident("response name");
    expect('~');
    sum(spec.fixed, &spec.random, true);
    end();
    return spec;
  }

  FixedFormula disp() {
    FixedFormula f;
    expect('~');
    sum(f, nullptr, false);
    end();
    return f;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw FormulaError(msg, pos_ + 1); }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool peek(char c) {
    skip();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  void expect(char c) {
    skip();
    if (pos_ >= s_.size()) fail(std::string("expected '") + c + "' but input ended");
    if (s_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void end() {
    skip();
    if (pos_ != s_.size()) fail("unexpected trailing input");
  }

  static bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }
  static bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

  bool at_ident() {
    skip();
    return pos_ < s_.size() && ident_start(s_[pos_]);
  }

  std::string ident(const char* what) {
    skip();
    if (pos_ >= s_.size()) fail(std::string("expected ") + what + " but input ended");
    if (!ident_start(s_[pos_])) fail(std::string("expected ") + what);
    std::size_t b = pos_;
    while (pos_ < s_.size() && ident_char(s_[pos_])) ++pos_;
    return std::string(s_.substr(b, pos_ - b));
  }

  // "0" or "1"; nullopt when the next token is not a literal.
  std::optional<int> literal() {
    skip();
    if (pos_ < s_.size() && (s_[pos_] == '0' || s_[pos_] == '1') &&
        (pos_ + 1 == s_.size() || !ident_char(s_[pos_ + 1]))) {
      return s_[pos_++] - '0';
    }
    return std::nullopt;
  }

  void sum(FixedFormula& f, std::vector<RandomTerm>* random, bool allow_random) {
    bool any = false;
    bool saw_equalto = false;
    std::set<std::string> seen;
    for (;;) {
      skip();
      if (pos_ >= s_.size()) fail("expected a term but input ended");
      if (auto lit = literal()) {
        f.intercept = (*lit == 1);
      } else if (peek('(')) {
        if (!allow_random) fail("random-effect terms are not supported in dispformula");
        random->push_back(bar_term(Structure::iid));
      } else if (at_ident()) {
        const std::size_t at = pos_;
        std::string name = ident("term");
        if (peek('(')) {
          if (!allow_random) {
            pos_ = at;
            fail("random-effect terms are not supported in dispformula");
          }
          Structure st;
          if (name == "equalto") st = Structure::equalto;
          else if (name == "propto") st = Structure::propto;
          else if (name == "diag") st = Structure::diag;
          else if (name == "us") st = Structure::unstructured;
          else {
            pos_ = at;
            fail("unknown structure keyword '" + name + "'");
          }
          if (st == Structure::equalto) {
            if (saw_equalto) {
              pos_ = at;
              fail("duplicate equalto term");
            }
            saw_equalto = true;
          }
          random->push_back(bar_term(st));
        } else {
          if (!seen.insert(name).second) {
            pos_ = at;
            fail("duplicate term '" + name + "'");
          }
          f.terms.push_back(std::move(name));
        }
      } else {
        fail("expected a term");
      }
      any = true;
      skip();
      if (peek('+')) {
        ++pos_;
        continue;
      }
      if (peek('-')) {
        ++pos_;
        auto lit = literal();
        if (!lit || *lit != 1) fail("only '- 1' may follow a minus sign");
        f.intercept = false;
        skip();
        if (peek('+')) {
          ++pos_;
          continue;
        }
      }
      break;
    }
    if (!any) fail("empty formula");
  }

  // "(" relhs "|" group ")" or keyword form with an optional ", matrix".
  RandomTerm bar_term(Structure st) {
    RandomTerm t;
    t.structure = st;
    expect('(');
    if (auto lit = literal()) {
      if (*lit == 0) {
        expect('+');
        t.factor = ident("factor name");
      }
    } else {
      t.factor = ident("factor name");
    }
    if (st == Structure::iid && !t.factor.empty()) t.structure = Structure::unstructured;
    expect('|');
    t.group = ident("grouping factor");
    const bool needs_matrix = st == Structure::equalto || st == Structure::propto;
    if (needs_matrix) {
      skip();
      if (!peek(',')) fail(std::string(to_string(st)) + " needs a matrix argument");
      ++pos_;
      t.matrix = ident("matrix name");
    } else if (peek(',')) {
      fail(std::string(to_string(st)) + " does not take a matrix argument");
    }
    expect(')');
    return t;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Parses "resp ~ fixed + random..." into a spec with default dispersion (~1),
// gaussian family and REML.
inline ModelSpec parse_formula(std::string_view text) { return detail::FormulaParser(text).model(); }

inline FixedFormula parse_dispformula(std::string_view text) { return detail::FormulaParser(text).disp(); }

inline std::string to_string(const FixedFormula& f) {
  std::string out = f.intercept ? "1" : "0";
  for (const auto& t : f.terms) out += " + " + t;
  return out;
}

inline std::string to_string(const RandomTerm& t) {
  std::string lhs = t.factor.empty() ? "1" : "0 + " + t.factor;
  std::string inner = "(" + lhs + "|" + t.group + (t.matrix ? ", " + *t.matrix : std::string()) + ")";
  switch (t.structure) {
    case Structure::iid: return inner;
    case Structure::unstructured: return t.factor.empty() ? "us" + inner : inner;
    default: return std::string(to_string(t.structure)) + inner;
  }
}

inline std::string to_string(const ModelSpec& s) {
  std::string out = s.response + " ~ " + to_string(s.fixed);
  for (const auto& r : s.random) out += " + " + to_string(r);
  return out;
}

// ---------------------------------------------------------------------------
// Design matrices
// ---------------------------------------------------------------------------

// Random term in indicator form: row i loads on level `level[i]` of group `group[i]`.
// The implied covariance is C(i,j) = [group_i == group_j] * G(level_i, level_j).
struct RandomDesign {
  std::string label;
  RandomTerm term;
  std::vector<int> group;
  std::vector<int> level;
  std::vector<std::string> group_names;
  std::vector<std::string> level_names;
  std::optional<Eigen::MatrixXd> fixed_matrix;

  int n_groups() const { return static_cast<int>(group_names.size()); }
  int q() const { return static_cast<int>(level_names.size()); }
};

struct DesignBundle {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  std::vector<std::string> x_names;
  std::vector<RandomDesign> random;
  Eigen::MatrixXd X_disp;  // zero columns: residual variance fixed at zero
  std::vector<std::string> disp_names;

  Eigen::Index n() const { return y.size(); }
};

// Levels sort numerically when every level is a number, otherwise lexicographically.
inline std::vector<std::string> factor_levels(const std::vector<std::string>& values) {
  std::set<std::string> uniq(values.begin(), values.end());
  std::vector<std::string> lv(uniq.begin(), uniq.end());
  const bool numeric = std::all_of(lv.begin(), lv.end(), [](const std::string& s) { return csv::to_double(s).has_value(); });
  if (numeric)
    std::stable_sort(lv.begin(), lv.end(),
                     [](const std::string& a, const std::string& b) { return *csv::to_double(a) < *csv::to_double(b); });
  return lv;
}

namespace detail {

inline const Column& checked_column(const EffectSizeTable& t, const std::string& name) {
  if (!t.has_column(name)) throw InputError("column '" + name + "' not found in data");
  const Column& c = t.column(name);
  for (std::size_t i = 0; i < c.text.size(); ++i)
    if (csv::is_missing(c.text[i]))
      throw InputError("missing value in column '" + name + "' at row " + std::to_string(i + 1));
  return c;
}

inline std::vector<int> level_index(const std::vector<std::string>& values, const std::vector<std::string>& levels) {
  std::map<std::string, int> pos;
  for (std::size_t k = 0; k < levels.size(); ++k) pos[levels[k]] = static_cast<int>(k);
  std::vector<int> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = pos.at(values[i]);
  return out;
}

// Fixed-effect style model matrix. Categorical columns use treatment coding,
// except the first categorical term of an intercept-free formula, which gets
// one indicator per level.
inline Eigen::MatrixXd model_matrix(const FixedFormula& f, const EffectSizeTable& t, std::vector<std::string>& names) {
  const Eigen::Index n = static_cast<Eigen::Index>(t.size());
  std::vector<Eigen::VectorXd> cols;
  names.clear();
  if (f.intercept) {
    cols.push_back(Eigen::VectorXd::Ones(n));
    names.push_back("(Intercept)");
  }
  bool full_dummy_used = f.intercept;
  for (const auto& term : f.terms) {
    const Column& c = checked_column(t, term);
    if (c.numbers) {
      cols.push_back(Eigen::Map<const Eigen::VectorXd>(c.numbers->data(), n));
      names.push_back(term);
      continue;
    }
    auto levels = factor_levels(c.text);
    auto idx = level_index(c.text, levels);
    const std::size_t first = full_dummy_used ? 1 : 0;
    full_dummy_used = true;
    for (std::size_t k = first; k < levels.size(); ++k) {
      Eigen::VectorXd col = Eigen::VectorXd::Zero(n);
      for (Eigen::Index i = 0; i < n; ++i)
        if (idx[static_cast<std::size_t>(i)] == static_cast<int>(k)) col(i) = 1.0;
      cols.push_back(std::move(col));
      names.push_back(term + levels[k]);
    }
  }
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = cols[j];
  return X;
}

}  // namespace detail

inline DesignBundle build_design(const ModelSpec& spec, const EffectSizeTable& table,
                                 const std::map<std::string, SamplingCovariance>& matrices) {
  DesignBundle d;
  const Eigen::Index n = static_cast<Eigen::Index>(table.size());

  const Column& resp = detail::checked_column(table, spec.response);
  if (!resp.numbers) throw InputError("response column '" + spec.response + "' is not numeric");
  d.y = Eigen::Map<const Eigen::VectorXd>(resp.numbers->data(), n);

  d.X = detail::model_matrix(spec.fixed, table, d.x_names);
  if (d.X.cols() > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.X);
    if (qr.rank() < d.X.cols()) throw InputError("fixed-effect design matrix is rank deficient");
  }
  if (d.X.cols() >= n) throw InputError("more fixed effects than observations");

  int n_equalto = 0;
  for (const auto& term : spec.random) {
    RandomDesign rd;
    rd.term = term;
    const Column& g = detail::checked_column(table, term.group);
    rd.group_names = factor_levels(g.text);
    rd.group = detail::level_index(g.text, rd.group_names);

    if (term.factor.empty()) {
      rd.level_names = {"(Intercept)"};
      rd.level.assign(static_cast<std::size_t>(n), 0);
    } else {
      const Column& f = detail::checked_column(table, term.factor);
      rd.level_names = factor_levels(f.text);
      rd.level = detail::level_index(f.text, rd.level_names);
    }

    if (term.matrix) {
      if (term.structure == Structure::equalto && ++n_equalto > 1) throw InputError("duplicate equalto term");
      auto it = matrices.find(*term.matrix);
      if (it == matrices.end()) throw InputError("matrix " + *term.matrix + " unbound");
      const SamplingCovariance& m = it->second;
      if (m.size() != rd.q())
        throw InputError("matrix " + *term.matrix + " has dimension " + std::to_string(m.size()) + " but factor '" +
                         (term.factor.empty() ? std::string("(Intercept)") : term.factor) + "' has " +
                         std::to_string(rd.q()) + " levels");
      if (term.factor.empty()) {
        rd.fixed_matrix = m.matrix;
      } else {
        // Matrix rows are matched to factor levels by label.
        SamplingCovariance aligned = reorder(m, rd.level_names);
        rd.fixed_matrix = aligned.matrix;
      }
      rd.label = *term.matrix;
    } else {
      rd.label = term.group;
    }
    if (term.structure == Structure::equalto && !term.factor.empty()) {
      std::set<int> used(rd.level.begin(), rd.level.end());
      if (static_cast<int>(used.size()) != rd.q() || rd.q() != static_cast<int>(n))
        throw InputError("equalto factor '" + term.factor + "' must enumerate every observation exactly once");
    }
    d.random.push_back(std::move(rd));
  }

  // Disambiguate repeated labels, e.g. (1|species) alongside us(1|species).
  std::map<std::string, int> count;
  for (auto& r : d.random)
    if (++count[r.label] > 1) r.label += "." + std::to_string(count[r.label]);

  d.X_disp = detail::model_matrix(spec.disp, table, d.disp_names);
  return d;
}

// Dense n x (groups*q) loading matrix, columns ordered group-major.
inline Eigen::MatrixXd dense_z(const RandomDesign& r) {
  const Eigen::Index n = static_cast<Eigen::Index>(r.group.size());
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(r.n_groups()) * r.q());
  for (Eigen::Index i = 0; i < n; ++i)
    Z(i, static_cast<Eigen::Index>(r.group[static_cast<std::size_t>(i)]) * r.q() + r.level[static_cast<std::size_t>(i)]) = 1.0;
  return Z;
}

// Covariance implied by one random term for a given block matrix G.
inline Eigen::MatrixXd term_covariance(const RandomDesign& r, const Eigen::MatrixXd& G) {
  const std::size_t n = r.group.size();
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (r.group[i] == r.group[j])
        C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = G(r.level[i], r.level[j]);
  return C;
}

}  // namespace metafit
