#include "divrate/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace divrate {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_number(std::string_view s, const std::string& what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  if (s == "nan" || s == "NaN") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf" || s == "Inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf" || s == "-Inf") return -std::numeric_limits<double>::infinity();
  std::string_view body = s;
  if (!body.empty() && body.front() == '+') body.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(body.data(), body.data() + body.size(), v);
  if (body.empty() || res.ec != std::errc() || res.ptr != body.data() + body.size())
    throw ValidationError(what + ": cannot parse '" + std::string(s) + "' as a number");
  return v;
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open '" + path.string() + "' for writing");
  return os;
}

std::string cell(double v) { return std::isnan(v) ? "" : format_number(v); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

class Issues {
 public:
  Issues(std::string source, std::size_t max) : source_(std::move(source)), max_(max) {}
  void add(std::size_t line, const std::string& msg) {
    if (list_.size() < max_) list_.push_back(line ? "line " + std::to_string(line) + ": " + msg : msg);
    ++count_;
  }
  bool any() const { return count_ > 0; }
  [[noreturn]] void raise() const {
    std::ostringstream os;
    os << source_ << ": " << count_ << (count_ == 1 ? " problem" : " problems");
    for (const auto& s : list_) os << "\n  " << s;
    if (count_ > list_.size()) os << "\n  ... and " << count_ - list_.size() << " more";
    throw ValidationError(os.str());
  }

 private:
  std::string source_;
  std::size_t max_;
  std::vector<std::string> list_;
  std::size_t count_ = 0;
};

bool close(double a, double b, double tol, double scale) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), scale});
}

}  // namespace

// ---------------------------------------------------------------- lineage CSV

void write_sample_csv(std::ostream& os, const SampleSet& s) {
  const bool vt = s.scheme == Scheme::VT, sizes = s.has_sizes;
  os << "id,parent_id,birth_time";
  if (sizes) os << ",size_birth";
  os << ",lifetime";
  if (sizes) os << ",size_division,increment,growth_rate";
  os << ",scheme";
  if (vt) os << (sizes ? ",age_at_T,size_at_T" : ",age_at_T");
  os << '\n';
  const std::string scheme = scheme_name(s.scheme);
  for (const auto& r : s.records) {
    os << r.id << ',' << r.parent << ',' << cell(r.birth_time);
    if (sizes) os << ',' << cell(r.size_birth);
    os << ',' << cell(r.lifetime);
    if (sizes) os << ',' << cell(r.size_division) << ',' << cell(r.increment) << ',' << cell(r.growth_rate);
    os << ',' << scheme;
    if (vt) {
      os << ',' << cell(r.age_at_T);
      if (sizes) os << ',' << cell(r.size_at_T);
    }
    os << '\n';
  }
}

void write_sample_csv(const fs::path& path, const SampleSet& s) {
  auto os = open_out(path);
  write_sample_csv(os, s);
}

SampleSet ingest_lineage_csv(const fs::path& path, const IngestOptions& opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read data file '" + path.string() + "'");
  return parse_lineage_csv(is, path.string(), opt);
}

SampleSet parse_lineage_csv(std::istream& is, const std::string& source, const IngestOptions& opt) {
  static const std::vector<std::string> known = {"id",        "parent_id",     "birth_time", "size_birth",
                                                 "lifetime",  "size_division", "increment",  "growth_rate",
                                                 "scheme",    "age_at_T",      "size_at_T"};
  Issues issues(source, opt.max_reported);
  std::string line;
  std::size_t lineno = 0;
  do {
    if (!std::getline(is, line)) throw ValidationError(source + ": empty file");
    ++lineno;
  } while (line.empty() || line[0] == '#');
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (col.count(header[c])) issues.add(lineno, "duplicate column '" + header[c] + "'");
    col[header[c]] = c;
  }
  for (const char* req : {"id", "parent_id", "birth_time", "lifetime"})
    if (!col.count(req)) issues.add(lineno, std::string("missing required column '") + req + "'");
  if (issues.any()) issues.raise();
  auto has = [&](const char* c) { return col.count(c) > 0; };

  SampleSet s;
  s.metadata = "experimental";
  std::vector<std::size_t> lines;
  std::set<std::string> schemes;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto f = split_csv(line);
    if (f.size() != header.size()) {
      issues.add(lineno, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
      continue;
    }
    CellRecord r;
    r.id = f[col["id"]];
    r.parent = f[col["parent_id"]];
    if (r.id.empty()) issues.add(lineno, "empty id");
    auto num = [&](const char* name, bool required) {
      auto it = col.find(name);
      if (it == col.end()) return std::numeric_limits<double>::quiet_NaN();
      const std::string& v = f[it->second];
      if (v.empty()) {
        if (required) issues.add(lineno, std::string("missing value for ") + name);
        return std::numeric_limits<double>::quiet_NaN();
      }
      try {
        return parse_number(v, name);
      } catch (const ValidationError& e) {
        issues.add(lineno, e.what());
        return std::numeric_limits<double>::quiet_NaN();
      }
    };
    r.birth_time = num("birth_time", true);
    r.size_birth = num("size_birth", false);
    r.lifetime = num("lifetime", false);
    r.size_division = num("size_division", false);
    r.increment = num("increment", false);
    r.growth_rate = num("growth_rate", false);
    if (has("age_at_T")) r.age_at_T = num("age_at_T", false);
    if (has("size_at_T")) r.size_at_T = num("size_at_T", false);
    if (has("scheme")) schemes.insert(f[col["scheme"]]);
    s.records.push_back(std::move(r));
    lines.push_back(lineno);
  }
  if (s.records.empty()) issues.add(0, "no data rows");
  for (const auto& c : col)
    if (std::find(known.begin(), known.end(), c.first) == known.end())
      issues.add(0, "unknown column '" + c.first + "'");

  // Scheme: option, column, or structure.
  if (opt.scheme) {
    s.scheme = *opt.scheme;
  } else if (schemes.size() > 1) {
    issues.add(0, "mixed values in the scheme column");
  } else if (schemes.size() == 1 && !schemes.begin()->empty()) {
    try {
      s.scheme = scheme_from_name(*schemes.begin());
    } catch (const ValidationError& e) {
      issues.add(0, e.what());
    }
  } else if (has("age_at_T")) {
    s.scheme = Scheme::VT;
  } else {
    std::unordered_map<std::string, int> children;
    for (const auto& r : s.records)
      if (!r.parent.empty()) ++children[r.parent];
    s.scheme = std::any_of(children.begin(), children.end(), [](const auto& p) { return p.second > 1; }) ? Scheme::U2
                                                                                                       : Scheme::U1;
  }
  const bool vt = s.scheme == Scheme::VT;
  s.has_sizes = has("size_birth") && (vt ? has("size_at_T") : has("size_division"));
  if (vt && !has("age_at_T")) issues.add(0, "snapshot (VT) data need an age_at_T column");

  // Per-record checks and derived fields.
  const double tol = opt.tolerance;
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    auto& r = s.records[i];
    const std::size_t ln = lines[i];
    if (!vt && !std::isfinite(r.lifetime)) issues.add(ln, "missing lifetime");
    if (std::isfinite(r.lifetime) && r.lifetime < 0.0) issues.add(ln, "negative lifetime");
    if (vt && !(r.age_at_T >= 0.0)) issues.add(ln, "age_at_T must be nonnegative");
    if (!s.has_sizes) continue;
    if (!(r.size_birth > 0.0)) issues.add(ln, "size_birth must be positive");
    if (vt) {
      if (!(r.size_at_T >= r.size_birth)) issues.add(ln, "size_at_T smaller than size_birth");
      continue;
    }
    if (!(r.size_division > 0.0)) issues.add(ln, "size_division must be positive");
    if (r.size_division < r.size_birth) issues.add(ln, "size_division < size_birth");
    const double inc = r.size_division - r.size_birth;
    if (has("increment") && std::isfinite(r.increment)) {
      if (!close(r.increment, inc, tol, 1e-12 * r.size_division))
        issues.add(ln, "increment " + format_number(r.increment) + " differs from size_division - size_birth = " +
                           format_number(inc));
    } else {
      r.increment = inc;
    }
    if (!std::isfinite(r.growth_rate) && r.lifetime > 0.0 && r.size_birth > 0.0)
      r.growth_rate = std::log(r.size_division / r.size_birth) / r.lifetime;
    if (std::isfinite(r.growth_rate) && r.growth_rate < 0.0) issues.add(ln, "negative growth_rate");
  }

  // Tree structure.
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < s.records.size(); ++i)
    if (!index.emplace(s.records[i].id, i).second) issues.add(lines[i], "duplicate id '" + s.records[i].id + "'");
  std::vector<int> parent(s.records.size(), -1);
  std::vector<int> nchild(s.records.size(), 0);
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    const auto& r = s.records[i];
    if (r.parent.empty()) continue;
    auto it = index.find(r.parent);
    if (it == index.end()) {
      if (!vt) issues.add(lines[i], "parent '" + r.parent + "' of '" + r.id + "' is not in the file");
      continue;
    }
    if (it->second == i) {
      issues.add(lines[i], "cell '" + r.id + "' is its own parent");
      continue;
    }
    parent[i] = static_cast<int>(it->second);
    ++nchild[it->second];
    const auto& p = s.records[it->second];
    const double div = p.birth_time + p.lifetime;
    if (std::isfinite(div) && std::isfinite(r.birth_time)) {
      const double scale = std::max(1.0, std::abs(div));
      if (r.birth_time < div - tol * scale)
        issues.add(lines[i], "child '" + r.id + "' born at " + format_number(r.birth_time) + " before its parent divides at " +
                                 format_number(div));
      else if (!vt && r.birth_time > div + tol * scale)
        issues.add(lines[i], "parent '" + p.id + "' lifetime " + format_number(p.lifetime) +
                                 " does not match the child's birth time " + format_number(r.birth_time));
    }
    if (s.has_sizes && !vt && std::isfinite(p.size_division) && r.size_birth > p.size_division * (1.0 + tol))
      issues.add(lines[i], "child '" + r.id + "' is born larger than its parent at division");
  }
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    if (nchild[i] > 2) issues.add(lines[i], "cell '" + s.records[i].id + "' has more than two children");
    if (s.scheme == Scheme::U1 && nchild[i] > 1)
      issues.add(lines[i], "cell '" + s.records[i].id + "' has two children in genealogical (U1) data");
  }
  // Cycles: walk each ancestry with a three-colour mark.
  std::vector<char> state(s.records.size(), 0);
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    std::vector<std::size_t> path;
    std::size_t c = i;
    while (state[c] == 0) {
      state[c] = 1;
      path.push_back(c);
      if (parent[c] < 0) break;
      c = static_cast<std::size_t>(parent[c]);
    }
    if (state[c] == 1 && parent[c] >= 0 && std::find(path.begin(), path.end(), c) != path.end())
      issues.add(lines[c], "cyclic parent links through '" + s.records[c].id + "'");
    for (std::size_t p : path) state[p] = 2;
  }
  if (issues.any()) issues.raise();

  switch (s.scheme) {
    case Scheme::U1:
      s.parameter = static_cast<double>(s.records.size()) - 1.0;
      break;
    case Scheme::U2: {
      double T = 0.0;
      for (const auto& r : s.records) T = std::max(T, r.birth_time + r.lifetime);
      s.parameter = opt.horizon.value_or(T);
      break;
    }
    case Scheme::VT: {
      double T = 0.0;
      for (const auto& r : s.records) T = std::max(T, r.birth_time + r.age_at_T);
      s.parameter = opt.horizon.value_or(T);
      break;
    }
  }
  return s;
}

// ---------------------------------------------------------------- result exports

void write_json(const fs::path& path, const json& j) {
  auto os = open_out(path);
  os << j.dump(2) << '\n';
}

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json diagnostics_json(const std::map<std::string, double>& d) {
  json j = json::object();
  for (const auto& [k, v] : d) j[k] = finite_or_null(v);
  return j;
}

}  // namespace

void write_estimate_csv(const fs::path& path, const EstimationResult& r, const RateFunction* truth) {
  auto os = open_out(path);
  os << "x,B,flag" << (truth ? ",B_true" : "") << '\n';
  const auto& e = r.estimate;
  for (std::size_t i = 0; i < e.x.size(); ++i) {
    os << format_number(e.x[i]) << ',' << format_number(e.values[i]) << ','
       << (i < r.flags.size() ? static_cast<int>(r.flags[i]) : 0);
    if (truth) os << ',' << format_number((*truth)(e.x[i]));
    os << '\n';
  }
}

json estimate_json(const EstimationResult& r) {
  json j;
  j["h"] = finite_or_null(r.h);
  j["h_cutoff"] = finite_or_null(r.h2);
  j["varpi"] = finite_or_null(r.varpi);
  j["floor_hits"] = r.floor_hits;
  j["effective_n"] = finite_or_null(r.effective_n);
  j["lambda"] = finite_or_null(r.lambda);
  j["grid_points"] = r.estimate.x.size();
  j["diagnostics"] = diagnostics_json(r.diagnostics);
  return j;
}

void write_eigen_csv(const fs::path& path, const EigenTriplet& t) {
  auto os = open_out(path);
  const auto& N = t.N;
  if (N.dim() == 1) {
    os << "x,N,phi\n";
    for (std::size_t i = 0; i < N.x.size(); ++i)
      os << format_number(N.x[i]) << ',' << format_number(N.values[i]) << ','
         << format_number(i < t.phi.size() ? t.phi[i] : std::numeric_limits<double>::quiet_NaN()) << '\n';
    return;
  }
  os << "xi,x,N,phi\n";
  const std::size_t ny = N.y.size();
  for (std::size_t i = 0; i < N.x.size(); ++i)
    for (std::size_t j = 0; j < ny; ++j) {
      if (N.y[j] < N.x[i] * (1.0 - 1e-12)) continue;
      const std::size_t c = i * ny + j;
      os << format_number(N.x[i]) << ',' << format_number(N.y[j]) << ',' << format_number(N.values[c]) << ','
         << format_number(c < t.phi.size() ? t.phi[c] : std::numeric_limits<double>::quiet_NaN()) << '\n';
    }
}

json eigen_json(const EigenTriplet& t) {
  json j;
  j["lambda"] = finite_or_null(t.lambda);
  j["doubling_time"] = t.lambda > 0.0 ? json(std::log(2.0) / t.lambda) : json(nullptr);
  j["k"] = t.k;
  j["oscillatory"] = t.oscillatory;
  j["iterations"] = t.iterations;
  j["residual"] = finite_or_null(t.residual);
  j["dimension"] = t.N.dim();
  j["diagnostics"] = diagnostics_json(t.diagnostics);
  return j;
}

namespace {

json row_json(const CorrelationRow& r) {
  json j = json::object();
  for (std::size_t c = 0; c < 6; ++c)
    j[CorrelationRow::labels()[c]] = r.defined[c] ? finite_or_null(r.value[c]) : json(nullptr);
  return j;
}

}  // namespace

json comparison_json(const ComparisonReport& r) {
  json j;
  j["scheme"] = scheme_name(r.scheme);
  j["metric"] = metric_name(r.metric.metric);
  if (r.metric.metric == Metric::l2_regularized) j["metric_bandwidth"] = r.metric.h;
  j["variability"] = {{"growth_cv", r.variability.growth_cv}, {"septum_cv", r.variability.septum_cv}};
  j["lambda"] = finite_or_null(r.lambda);
  j["lineage_autocorrelation"] = finite_or_null(r.autocorrelation);
  j["data_stationary"] = r.data_stationary;
  j["ranking_basis"] = r.ranking_basis;
  j["data_correlations"] = row_json(r.data_row);
  json models = json::array();
  for (const auto& m : r.models) {
    json e;
    e["model"] = model_type_name(m.model.type);
    e["estimator"] = m.model.estimator;
    e["kappa"] = m.model.kappa;
    e["k"] = m.model.k;
    e["bandwidth"] = finite_or_null(m.model.fit.h);
    e["degenerate"] = m.degenerate;
    if (!m.note.empty()) e["note"] = m.note;
    e["distance"] = finite_or_null(m.distance);
    json md = json::object();
    for (std::size_t c = 0; c < 3; ++c)
      md[MarginalSet::labels()[c]] = m.degenerate ? json(nullptr) : finite_or_null(m.marginal_distance[c]);
    e["marginal_distances"] = md;
    e["correlations"] = row_json(m.row);
    e["correlation_deviation"] = finite_or_null(m.correlation_deviation);
    e["steady_state"] = {{"stabilized", m.steady.stabilized},
                         {"lambda", finite_or_null(m.steady.lambda)},
                         {"lost_fraction", finite_or_null(m.steady.lost_fraction)},
                         {"steps", m.steady.steps}};
    models.push_back(e);
  }
  j["models"] = models;
  json ranking = json::array();
  for (std::size_t i : r.ranking) ranking.push_back(model_type_name(r.models[i].model.type));
  j["ranking"] = ranking;
  j["ranking_index"] = r.ranking;
  return j;
}

void write_correlation_csv(const fs::path& path, const ComparisonReport& r) {
  auto os = open_out(path);
  os << "source";
  for (const auto& l : CorrelationRow::labels()) os << ',' << l;
  os << '\n';
  auto row = [&](const std::string& name, const CorrelationRow& c) {
    os << name;
    for (std::size_t k = 0; k < 6; ++k) os << ',' << (c.defined[k] ? format_number(c.value[k]) : "");
    os << '\n';
  };
  row("data", r.data_row);
  for (const auto& m : r.models) row(model_type_name(m.model.type), m.row);
}

void write_marginals_csv(const fs::path& path, const ComparisonReport& r) {
  auto os = open_out(path);
  os << "coordinate,source,x,density\n";
  auto dump = [&](const std::string& source, const MarginalSet& m) {
    const GridDensity* g[3] = {&m.size, &m.increment, &m.age};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < g[c]->x.size(); ++i)
        os << MarginalSet::labels()[c] << ',' << source << ',' << format_number(g[c]->x[i]) << ','
           << format_number(g[c]->values[i]) << '\n';
  };
  if (r.data_stationary) dump("data", r.data_marginals);
  for (const auto& m : r.models)
    if (!m.degenerate && !m.marginals.size.x.empty()) dump(model_type_name(m.model.type), m.marginals);
}

}  // namespace divrate
