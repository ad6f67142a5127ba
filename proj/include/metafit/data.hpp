#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metafit/csv.hpp"
#include "metafit/error.hpp"

namespace metafit {

// A data column kept as text; `numbers` is set when every entry parses as a double.
struct Column {
  std::vector<std::string> text;
  std::optional<std::vector<double>> numbers;

  static Column from_text(std::vector<std::string> text) {
    Column c;
    std::vector<double> nums;
    nums.reserve(text.size());
    bool ok = !text.empty();
    for (const auto& s : text) {
      auto d = csv::to_double(s);
      if (!d) {
        if (!csv::is_missing(s)) ok = false;
        nums.push_back(std::numeric_limits<double>::quiet_NaN());
      } else {
        nums.push_back(*d);
      }
    }
    // A column of only missing values is not numeric.
    if (ok && std::all_of(nums.begin(), nums.end(), [](double x) { return std::isnan(x); })) ok = false;
    c.text = std::move(text);
    if (ok) c.numbers = std::move(nums);
    return c;
  }

  static Column from_numbers(const std::vector<double>& xs) {
    Column c;
    c.text.reserve(xs.size());
    for (double x : xs) c.text.push_back(csv::format_number(x, 17));
    c.numbers = xs;
    return c;
  }
};

// Names of the role columns in an input file.
struct ColumnMap {
  std::string y = "yi";
  std::string v = "vi";
  std::string cluster;  // empty: every row is its own cluster
  std::string obs;      // empty: synthesize 1..n
};

// Effect sizes with known sampling variances. Row order is fixed at construction
// and is the order used by every downstream matrix.
class EffectSizeTable {
 public:
  EffectSizeTable() = default;

  EffectSizeTable(std::vector<std::string> obs_id, std::vector<std::string> cluster_id,
                  std::vector<double> y, std::vector<double> v,
                  std::map<std::string, Column> columns = {}, ColumnMap names = {})
      : obs_id_(std::move(obs_id)),
        cluster_id_(std::move(cluster_id)),
        y_(std::move(y)),
        v_(std::move(v)),
        columns_(std::move(columns)),
        names_(std::move(names)) {
    const std::size_t n = y_.size();
    if (n == 0) throw InputError("no rows");
    if (v_.size() != n || obs_id_.size() != n || cluster_id_.size() != n)
      throw InputError("effect-size table columns differ in length");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < n; ++i) {
      if (!seen.insert(obs_id_[i]).second)
        throw InputError("duplicate obs_id '" + obs_id_[i] + "' in row " + std::to_string(i + 1));
      if (!std::isfinite(y_[i]))
        throw InputError("non-finite effect size in row " + std::to_string(i + 1));
      if (!(v_[i] >= 0.0) || !std::isfinite(v_[i]))
        throw InputError("negative or non-finite sampling variance in row " + std::to_string(i + 1));
    }
    if (names_.cluster.empty()) names_.cluster = "study";
    if (names_.obs.empty()) names_.obs = "id";
    for (const auto& [name, col] : columns_)
      if (col.text.size() != n) throw InputError("column '" + name + "' has wrong length");
    columns_.try_emplace(names_.y, Column::from_numbers(y_));
    if (!names_.v.empty()) columns_.try_emplace(names_.v, Column::from_numbers(v_));
    columns_.try_emplace(names_.cluster, Column::from_text(cluster_id_));
    columns_.try_emplace(names_.obs, Column::from_text(obs_id_));
  }

  std::size_t size() const { return y_.size(); }
  const std::vector<std::string>& obs_id() const { return obs_id_; }
  const std::vector<std::string>& cluster_id() const { return cluster_id_; }
  const std::vector<double>& y() const { return y_; }
  const std::vector<double>& v() const { return v_; }
  const ColumnMap& names() const { return names_; }

  bool has_column(const std::string& name) const { return columns_.count(name) > 0; }

  const Column& column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw InputError("unknown column '" + name + "'");
    return it->second;
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> out;
    for (const auto& kv : columns_) out.push_back(kv.first);
    return out;
  }

  // Row indices per cluster, clusters in first-appearance order.
  std::vector<std::pair<std::string, std::vector<Eigen::Index>>> clusters() const {
    std::vector<std::pair<std::string, std::vector<Eigen::Index>>> out;
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < size(); ++i) {
      auto [it, fresh] = pos.try_emplace(cluster_id_[i], out.size());
      if (fresh) out.push_back({cluster_id_[i], {}});
      out[it->second].second.push_back(static_cast<Eigen::Index>(i));
    }
    return out;
  }

 private:
  std::vector<std::string> obs_id_;
  std::vector<std::string> cluster_id_;
  std::vector<double> y_;
  std::vector<double> v_;
  std::map<std::string, Column> columns_;
  ColumnMap names_;
};

inline EffectSizeTable table_from_csv(const csv::Table& t, const ColumnMap& map,
                                      const std::string& source = "<data>") {
  if (t.rows.empty()) throw InputError(source + ": no rows");
  auto need = [&](const std::string& name, const char* role) {
    auto j = t.column(name);
    if (!j) throw InputError(source + ": missing " + std::string(role) + " column '" + name + "'");
    return *j;
  };
  const std::size_t jy = need(map.y, "effect size");
  // An empty v mapping means no sampling-variance column (all zeros).
  std::optional<std::size_t> jv;
  if (!map.v.empty()) jv = need(map.v, "sampling variance");
  std::optional<std::size_t> jc, jo;
  if (!map.cluster.empty()) jc = need(map.cluster, "cluster");
  if (!map.obs.empty()) jo = need(map.obs, "observation id");

  const std::size_t n = t.rows.size();
  std::vector<double> y(n), v(n);
  std::vector<std::string> obs(n), cl(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    const std::string r = std::to_string(i + 1);
    auto yi = csv::to_double(row[jy]);
    if (!yi) throw InputError(source + ": non-numeric " + map.y + " '" + row[jy] + "' in row " + r);
    auto vi = jv ? csv::to_double(row[*jv]) : std::optional<double>(0.0);
    if (!vi) throw InputError(source + ": non-numeric " + map.v + " '" + row[*jv] + "' in row " + r);
    if (*vi < 0) throw InputError(source + ": negative sampling variance in row " + r);
    y[i] = *yi;
    v[i] = *vi;
    obs[i] = jo ? row[*jo] : std::to_string(i + 1);
    if (jo && csv::is_missing(obs[i])) throw InputError(source + ": missing observation id in row " + r);
    cl[i] = jc ? row[*jc] : obs[i];
    if (jc && csv::is_missing(cl[i])) throw InputError(source + ": missing cluster id in row " + r);
  }
  std::map<std::string, Column> cols;
  for (std::size_t j = 0; j < t.header.size(); ++j) {
    std::vector<std::string> text(n);
    for (std::size_t i = 0; i < n; ++i) text[i] = t.rows[i][j];
    cols.emplace(t.header[j], Column::from_text(std::move(text)));
  }
  ColumnMap names = map;
  if (names.obs.empty()) {
    names.obs = cols.count("id") ? "obs_id" : "id";
    cols.emplace(names.obs, Column::from_text(obs));
  }
  if (names.cluster.empty()) names.cluster = names.obs;
  return EffectSizeTable(std::move(obs), std::move(cl), std::move(y), std::move(v), std::move(cols), names);
}

inline EffectSizeTable load_table(const std::string& path, const ColumnMap& map = {}) {
  return table_from_csv(csv::read_file(path), map, path);
}

// Known sampling-error covariance matrix with row labels and block layout.
struct SamplingCovariance {
  Eigen::MatrixXd matrix;
  std::vector<std::string> labels;
  std::map<std::string, std::vector<Eigen::Index>> blocks;

  Eigen::Index size() const { return matrix.rows(); }

  // Throws when symmetry, positive diagonal or positive semidefiniteness fail.
  void validate() const {
    const Eigen::Index n = matrix.rows();
    if (matrix.cols() != n) throw InputError("covariance matrix is not square");
    if (static_cast<Eigen::Index>(labels.size()) != n)
      throw InputError("covariance matrix label count differs from dimension");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(matrix(i, i) > 0)) throw InputError("covariance matrix diagonal must be positive (row " + labels[i] + ")");
      for (Eigen::Index j = 0; j < i; ++j)
        if (std::abs(matrix(i, j) - matrix(j, i)) > 1e-12)
          throw InputError("covariance matrix is not symmetric at (" + labels[i] + ", " + labels[j] + ")");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(matrix, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    if (ev(0) < -1e-8 * std::max(ev(n - 1), 0.0))
      throw InputError("covariance matrix is not positive semidefinite");
  }
};

// Groups rows into connected blocks of nonzero off-diagonal entries.
inline std::map<std::string, std::vector<Eigen::Index>> infer_blocks(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  std::vector<Eigen::Index> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](Eigen::Index a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j)
      if (m(i, j) != 0.0 || m(j, i) != 0.0) parent[find(i)] = find(j);
  std::map<Eigen::Index, std::vector<Eigen::Index>> byroot;
  for (Eigen::Index i = 0; i < n; ++i) byroot[find(i)].push_back(i);
  std::map<std::string, std::vector<Eigen::Index>> out;
  std::size_t b = 0;
  for (auto& [root, rows] : byroot) out.emplace("block" + std::to_string(++b), std::move(rows));
  return out;
}

inline SamplingCovariance diag_vcv(const EffectSizeTable& t) {
  const Eigen::Index n = static_cast<Eigen::Index>(t.size());
  SamplingCovariance s;
  s.matrix = Eigen::MatrixXd::Zero(n, n);
  s.labels = t.obs_id();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(t.v()[i] > 0)) throw InputError("sampling variance must be positive in row " + std::to_string(i + 1));
    s.matrix(i, i) = t.v()[i];
    s.blocks.emplace(t.obs_id()[i], std::vector<Eigen::Index>{i});
  }
  return s;
}

// Constant within-cluster correlation: entry (i,j) = rho*sqrt(v_i v_j) for i != j in the same cluster.
inline SamplingCovariance vcalc_constant_rho(const EffectSizeTable& t, double rho) {
  if (!(rho > -1.0 && rho < 1.0)) throw InputError("rho must lie strictly between -1 and 1");
  SamplingCovariance s = diag_vcv(t);
  s.blocks.clear();
  const auto& v = t.v();
  for (const auto& [name, rows] : t.clusters()) {
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = 0; b < a; ++b) {
        const Eigen::Index i = rows[a], j = rows[b];
        const double c = rho * std::sqrt(v[i] * v[j]);
        s.matrix(i, j) = c;
        s.matrix(j, i) = c;
      }
    s.blocks.emplace(name, rows);
  }
  return s;
}

// Matrix CSV: first row and first column carry labels.
inline SamplingCovariance matrix_from_csv(const csv::Table& t, const std::string& source = "<matrix>") {
  const std::size_t n = t.rows.size();
  if (n == 0) throw InputError(source + ": no rows");
  if (t.header.size() != n + 1)
    throw InputError(source + ": matrix must be square with a label column (" + std::to_string(n) + " rows, " +
                     std::to_string(t.header.size() - 1) + " columns)");
  SamplingCovariance s;
  s.matrix.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::vector<std::string> col_labels(t.header.begin() + 1, t.header.end());
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(t.rows[i][0]);
    for (std::size_t j = 0; j < n; ++j) {
      auto d = csv::to_double(t.rows[i][j + 1]);
      if (!d) throw InputError(source + ": non-numeric entry in row " + std::to_string(i + 1));
      s.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = *d;
    }
  }
  if (col_labels != s.labels) {
    // Columns may be listed in another order; permute them to match the rows.
    std::map<std::string, std::size_t> cpos;
    for (std::size_t j = 0; j < n; ++j) cpos[col_labels[j]] = j;
    if (cpos.size() != n) throw InputError(source + ": duplicate column labels");
    Eigen::MatrixXd m(s.matrix.rows(), s.matrix.cols());
    for (std::size_t j = 0; j < n; ++j) {
      auto it = cpos.find(s.labels[j]);
      if (it == cpos.end()) throw InputError(source + ": row label '" + s.labels[j] + "' has no matching column");
      m.col(static_cast<Eigen::Index>(j)) = s.matrix.col(static_cast<Eigen::Index>(it->second));
    }
    s.matrix = std::move(m);
  }
  s.blocks = infer_blocks(s.matrix);
  s.validate();
  return s;
}

inline SamplingCovariance load_matrix(const std::string& path) {
  return matrix_from_csv(csv::read_file(path), path);
}

inline void write_matrix(std::ostream& os, const SamplingCovariance& s, int digits = 10) {
  os << "\"\"";
  for (const auto& l : s.labels) os << ',' << csv::quote_if_needed(l);
  os << '\n';
  for (Eigen::Index i = 0; i < s.matrix.rows(); ++i) {
    os << csv::quote_if_needed(s.labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < s.matrix.cols(); ++j) os << ',' << csv::format_number(s.matrix(i, j), digits);
    os << '\n';
  }
}

// Reorders a labeled matrix to a label sequence; the label sets must coincide.
inline SamplingCovariance reorder(const SamplingCovariance& s, const std::vector<std::string>& order) {
  if (order.size() != s.labels.size())
    throw InputError("matrix has " + std::to_string(s.labels.size()) + " labels, expected " +
                     std::to_string(order.size()));
  std::map<std::string, Eigen::Index> pos;
  for (std::size_t i = 0; i < s.labels.size(); ++i) pos[s.labels[i]] = static_cast<Eigen::Index>(i);
  std::vector<Eigen::Index> perm;
  for (const auto& l : order) {
    auto it = pos.find(l);
    if (it == pos.end()) throw InputError("label '" + l + "' not found in matrix");
    perm.push_back(it->second);
  }
  SamplingCovariance out;
  out.labels = order;
  out.matrix = s.matrix(perm, perm);
  out.blocks = infer_blocks(out.matrix);
  return out;
}

inline SamplingCovariance align_to(const SamplingCovariance& s, const EffectSizeTable& t) {
  return reorder(s, t.obs_id());
}

// ---------------------------------------------------------------------------
// Effect-size computation
// ---------------------------------------------------------------------------

enum class Measure { SMD, lnRR, lnOR, lnIRR };

inline const char* to_string(Measure m) {
  switch (m) {
    case Measure::SMD: return "SMD";
    case Measure::lnRR: return "lnRR";
    case Measure::lnOR: return "lnOR";
    case Measure::lnIRR: return "lnIRR";
  }
  return "?";
}

inline Measure parse_measure(const std::string& s) {
  if (s == "SMD") return Measure::SMD;
  if (s == "lnRR" || s == "ROM") return Measure::lnRR;
  if (s == "lnOR" || s == "OR") return Measure::lnOR;
  if (s == "lnIRR" || s == "IRR" || s == "IRLN") return Measure::lnIRR;
  throw InputError("unknown measure '" + s + "' (expected SMD, lnRR, lnOR or lnIRR)");
}

// One arm's summary statistics. `exposure` is the arm size for binary data
// and the person-time for count data.
struct ArmSummary {
  double mean = 0.0;
  double sd = 0.0;
  double n = 0.0;
  double events = 0.0;
  double exposure = 0.0;
};

struct StudyArms {
  std::string study;
  ArmSummary treatment;
  ArmSummary control;
};

struct EscalcOptions {
  bool continuity_correction = false;  // add 0.5 to every cell of a study with a zero cell
  bool smd_variance_uses_g = true;     // g^2 (true) or d^2 in the second variance term
};

struct EffectSize {
  double y = 0.0;
  double v = 0.0;
  bool corrected = false;
};

inline EffectSize compute_effect(Measure m, const StudyArms& s, const EscalcOptions& opt = {}) {
  const auto& t = s.treatment;
  const auto& c = s.control;
  const std::string where = " (study '" + s.study + "')";
  EffectSize e;
  switch (m) {
    case Measure::SMD: {
      if (!(t.sd > 0 && c.sd > 0)) throw InputError("SMD needs positive standard deviations" + where);
      if (!(t.n >= 2 && c.n >= 2)) throw InputError("SMD needs n >= 2 per arm" + where);
      const double df = t.n + c.n - 2.0;
      const double sp = std::sqrt(((t.n - 1) * t.sd * t.sd + (c.n - 1) * c.sd * c.sd) / df);
      const double d = (t.mean - c.mean) / sp;
      const double J = 1.0 - 3.0 / (4.0 * df - 1.0);
      const double g = J * d;
      const double es = opt.smd_variance_uses_g ? g : d;
      e.y = g;
      e.v = (t.n + c.n) / (t.n * c.n) + es * es / (2.0 * (t.n + c.n));
      break;
    }
    case Measure::lnRR: {
      if (!(t.mean > 0 && c.mean > 0)) throw InputError("lnRR needs positive means" + where);
      if (!(t.n >= 1 && c.n >= 1)) throw InputError("lnRR needs positive sample sizes" + where);
      e.y = std::log(t.mean / c.mean);
      e.v = t.sd * t.sd / (t.n * t.mean * t.mean) + c.sd * c.sd / (c.n * c.mean * c.mean);
      break;
    }
    case Measure::lnOR: {
      double a = t.events, b = t.exposure - t.events, cc = c.events, d = c.exposure - c.events;
      if (a < 0 || b < 0 || cc < 0 || d < 0) throw InputError("lnOR cells must be non-negative" + where);
      if (a == 0 || b == 0 || cc == 0 || d == 0) {
        if (!opt.continuity_correction) throw InputError("zero cell without continuity correction" + where);
        a += 0.5, b += 0.5, cc += 0.5, d += 0.5;
        e.corrected = true;
      }
      e.y = std::log(a * d / (b * cc));
      e.v = 1 / a + 1 / b + 1 / cc + 1 / d;
      break;
    }
    case Measure::lnIRR: {
      double x1 = t.events, x2 = c.events;
      if (!(t.exposure > 0 && c.exposure > 0)) throw InputError("lnIRR needs positive person-time" + where);
      if (x1 < 0 || x2 < 0) throw InputError("lnIRR event counts must be non-negative" + where);
      if (x1 == 0 || x2 == 0) {
        if (!opt.continuity_correction) throw InputError("zero events without continuity correction" + where);
        x1 += 0.5, x2 += 0.5;
        e.corrected = true;
      }
      e.y = std::log((x1 / t.exposure) / (x2 / c.exposure));
      e.v = 1 / x1 + 1 / x2;
      break;
    }
  }
  return e;
}

// One row per study; cluster = study, obs = 1..k.
inline EffectSizeTable escalc(Measure m, std::span<const StudyArms> studies, const EscalcOptions& opt = {}) {
  if (studies.empty()) throw InputError("no rows");
  std::vector<std::string> obs, cl;
  std::vector<double> y, v;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    auto e = compute_effect(m, studies[i], opt);
    obs.push_back(std::to_string(i + 1));
    cl.push_back(studies[i].study.empty() ? std::to_string(i + 1) : studies[i].study);
    y.push_back(e.y);
    v.push_back(e.v);
  }
  return EffectSizeTable(std::move(obs), std::move(cl), std::move(y), std::move(v), {},
                         ColumnMap{"yi", "vi", "study", "id"});
}

// ---------------------------------------------------------------------------
// Arm-level counts for one-stage models
// ---------------------------------------------------------------------------

struct StudyCounts {
  std::string study;
  double events_treatment = 0;
  double size_treatment = 0;  // n (binomial) or person-time (Poisson)
  double events_control = 0;
  double size_control = 0;
};

struct ArmTable {
  std::vector<StudyCounts> studies;

  std::size_t size() const { return studies.size(); }

  void validate() const {
    if (studies.empty()) throw InputError("no rows");
    for (const auto& s : studies) {
      if (s.events_treatment < 0 || s.events_control < 0 ||
          s.events_treatment != std::floor(s.events_treatment) || s.events_control != std::floor(s.events_control))
        throw InputError("events must be non-negative integers (study '" + s.study + "')");
      if (!(s.size_treatment > 0 && s.size_control > 0))
        throw InputError("arm size or time must be positive (study '" + s.study + "')");
    }
  }
};

struct ArmColumnMap {
  std::string study = "study";
  std::string arm = "arm";
  std::string events = "events";
  std::string size = "n";
  std::string treatment_label = "treatment";
  std::string control_label = "control";
};

// Long format: one row per (study, arm). Each study needs exactly one row of each arm.
inline ArmTable arm_table_from_csv(const csv::Table& t, const ArmColumnMap& map,
                                   const std::string& source = "<arms>") {
  if (t.rows.empty()) throw InputError(source + ": no rows");
  auto need = [&](const std::string& name) {
    auto j = t.column(name);
    if (!j) throw InputError(source + ": missing column '" + name + "'");
    return *j;
  };
  const auto js = need(map.study), ja = need(map.arm), je = need(map.events), jn = need(map.size);
  std::vector<std::string> order;
  std::map<std::string, StudyCounts> by;
  std::map<std::string, std::pair<int, int>> seen;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string r = std::to_string(i + 1);
    auto ev = csv::to_double(row[je]);
    auto sz = csv::to_double(row[jn]);
    if (!ev) throw InputError(source + ": non-numeric events in row " + r);
    if (!sz) throw InputError(source + ": non-numeric size/time in row " + r);
    const std::string& st = row[js];
    if (!by.count(st)) {
      order.push_back(st);
      by[st].study = st;
    }
    auto& sc = by[st];
    if (row[ja] == map.treatment_label) {
      ++seen[st].first;
      sc.events_treatment = *ev;
      sc.size_treatment = *sz;
    } else if (row[ja] == map.control_label) {
      ++seen[st].second;
      sc.events_control = *ev;
      sc.size_control = *sz;
    } else {
      throw InputError(source + ": unknown arm label '" + row[ja] + "' in row " + r);
    }
  }
  ArmTable out;
  for (const auto& st : order) {
    if (seen[st].first != 1 || seen[st].second != 1)
      throw InputError(source + ": study '" + st + "' must have exactly one treatment and one control row");
    out.studies.push_back(by[st]);
  }
  out.validate();
  return out;
}

inline ArmTable load_arm_table(const std::string& path, const ArmColumnMap& map = {}) {
  return arm_table_from_csv(csv::read_file(path), map, path);
}

}  // namespace metafit
