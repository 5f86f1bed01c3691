#include "divrate/cli.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <type_traits>

#include "CLI11.hpp"

#include "divrate/estimators.hpp"
#include "divrate/io.hpp"
#include "divrate/numerics.hpp"
#include "divrate/smoothing.hpp"
#include "divrate/solver.hpp"

namespace divrate {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string command_name(Command c) {
  switch (c) {
    case Command::simulate:
      return "simulate";
    case Command::eigen:
      return "eigen";
    case Command::estimate:
      return "estimate";
    case Command::compare:
      return "compare";
  }
  return "simulate";
}

Command command_from_name(const std::string& s) {
  for (Command c : {Command::simulate, Command::eigen, Command::estimate, Command::compare})
    if (command_name(c) == s) return c;
  throw ValidationError("unknown command '" + s + "' (simulate, eigen, estimate, compare)");
}

// ---------------------------------------------------------------- config parsing

namespace {

template <class T>
const char* type_label() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) return "a nonnegative integer";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "a list of numbers";
}

template <class T>
T convert(const json& v, const std::string& key) {
  bool ok;
  if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
  else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) ok = v.is_number_unsigned();
  else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
  else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
  else ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); });
  if (!ok) throw ValidationError("config key '" + key + "': expected " + type_label<T>() + ", found " + v.dump());
  return v.get<T>();
}

//! One JSON object of the config: typed access with defaults, echo into `out`, unknown-key rejection.
class Block {
 public:
  Block(const json* in, std::string path) : in_(in), path_(std::move(path)) {
    if (in_ && !in_->is_object()) throw ValidationError("config key '" + path_ + "': expected an object");
  }

  bool present() const { return in_ != nullptr; }
  bool has(const std::string& k) const { return in_ && in_->contains(k); }
  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json* raw(const std::string& k) {
    used_.insert(k);
    return has(k) ? &in_->at(k) : nullptr;
  }

  template <class T>
  T get(const std::string& k, T def) {
    if (const json* v = raw(k)) def = convert<T>(*v, key(k));
    out[k] = def;
    return def;
  }
  template <class T>
  std::optional<T> opt(const std::string& k) {
    const json* v = raw(k);
    if (!v || v->is_null()) {
      out[k] = nullptr;
      return std::nullopt;
    }
    T t = convert<T>(*v, key(k));
    out[k] = t;
    return t;
  }
  template <class T>
  T require(const std::string& k) {
    if (!has(k)) throw ValidationError("config: missing key '" + key(k) + "'");
    return get<T>(k, T{});
  }
  double positive(const std::string& k, std::optional<double> def = std::nullopt) {
    if (!def && !has(k)) throw ValidationError("config: missing key '" + key(k) + "'");
    double v = get<double>(k, def.value_or(0.0));
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("config key '" + key(k) + "': must be positive");
    return v;
  }
  Block child(const std::string& k) {
    used_.insert(k);
    return Block(has(k) ? &in_->at(k) : nullptr, key(k));
  }
  //! Rejects keys outside `keys` before any of them is read, so misspellings are not reported as missing keys.
  void allow(std::initializer_list<const char*> keys) {
    std::set<std::string> ok(keys.begin(), keys.end());
    ok.insert(used_.begin(), used_.end());
    reject_unknown(ok);
  }
  void finish() { reject_unknown(used_); }

  json out = json::object();

 private:
  const json* in_;
  std::string path_;
  std::set<std::string> used_;

  void reject_unknown(const std::set<std::string>& ok) const {
    if (!in_) return;
    std::vector<std::string> unknown;
    for (const auto& item : in_->items())
      if (!ok.count(item.key())) unknown.push_back(key(item.key()));
    if (unknown.empty()) return;
    std::string msg = "config: unknown key";
    msg += unknown.size() > 1 ? "s " : " ";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", '" : "'") + unknown[i] + "'";
    msg += " (accepted here:";
    for (const auto& u : ok) msg += " " + u;
    throw ValidationError(msg + ")");
  }
};

std::optional<std::array<double, 2>> parse_range(Block& b, const std::string& k) {
  auto v = b.opt<std::vector<double>>(k);
  if (!v) return std::nullopt;
  if (v->size() != 2 || !((*v)[0] < (*v)[1]))
    throw ValidationError("config key '" + b.key(k) + "': expected [lo, hi] with lo < hi");
  return std::array<double, 2>{(*v)[0], (*v)[1]};
}

RateFunction parse_rate(const json* j, const std::string& path, json& out) {
  if (!j) throw ValidationError("config: missing key '" + path + "'");
  if (j->is_number()) {
    out = {{"form", "constant"}, {"value", j->get<double>()}};
    return RateFunction::constant(j->get<double>());
  }
  Block b(j, path);
  const std::string form = b.require<std::string>("form");
  RateFunction r;
  if (form == "constant") {
    b.allow({"value"});
    r = RateFunction::constant(b.require<double>("value"));
  } else if (form == "power") {
    b.allow({"c", "exponent"});
    double c = b.get<double>("c", 1.0);
    r = RateFunction::power(c, b.require<double>("exponent"));
  } else if (form == "step") {
    b.allow({"c", "threshold"});
    double c = b.get<double>("c", 1.0);
    r = RateFunction::step(c, b.require<double>("threshold"));
  } else if (form == "table") {
    b.allow({"grid", "values", "tail", "tail_exponent"});
    auto g = b.require<std::vector<double>>("grid");
    auto v = b.require<std::vector<double>>("values");
    std::string tail = b.get<std::string>("tail", "constant_last");
    double e = b.get<double>("tail_exponent", 0.0);
    TailPolicy tp = tail == "constant_last"         ? TailPolicy::constant_last
                    : tail == "power_law"           ? TailPolicy::power_law
                    : tail == "zero_before_support" ? TailPolicy::zero_before_support
                                                    : throw ValidationError("config key '" + b.key("tail") +
                                                                            "': expected constant_last, power_law or "
                                                                            "zero_before_support");
    r = RateFunction(g, v, tp, e);
  } else {
    throw ValidationError("config key '" + b.key("form") + "': unknown rate form '" + form +
                          "' (constant, power, step, table)");
  }
  b.finish();
  out = b.out;
  return r;
}

GrowthLaw parse_growth(Block& b) {
  b.allow({"law", "kappa", "grid", "tau"});
  const std::string law = b.get<std::string>("law", "exponential");
  GrowthLaw g;
  if (law == "exponential") {
    g = GrowthLaw::exponential(b.positive("kappa", 1.0));
  } else if (law == "table") {
    g = GrowthLaw::tabulated(b.require<std::vector<double>>("grid"), b.require<std::vector<double>>("tau"));
  } else {
    throw ValidationError("config key '" + b.key("law") + "': unknown growth law '" + law + "' (exponential, table)");
  }
  b.finish();
  return g;
}

FragmentationKernel parse_kernel(const json* j, const std::string& path, json& out) {
  if (!j) {
    out = {{"type", "mitosis"}};
    return FragmentationKernel::mitosis();
  }
  json obj = j->is_string() ? json{{"type", *j}} : *j;
  Block b(&obj, path);
  b.allow({"type", "cv", "grid", "values"});
  const std::string type = b.require<std::string>("type");
  FragmentationKernel k;
  if (type == "mitosis") {
    k = FragmentationKernel::mitosis();
  } else if (type == "uniform") {
    k = FragmentationKernel::uniform();
  } else if (type == "beta") {
    double cv = b.positive("cv");
    if (!(cv < 1.0)) throw ValidationError("config key '" + b.key("cv") + "': must be below 1");
    k = beta_septum_kernel(cv);
  } else if (type == "table") {
    k = FragmentationKernel::density(b.require<std::vector<double>>("grid"), b.require<std::vector<double>>("values"));
  } else {
    throw ValidationError("config key '" + b.key("type") + "': unknown kernel '" + type +
                          "' (mitosis, uniform, beta, table)");
  }
  b.finish();
  out = b.out;
  return k;
}

ModelSpec parse_model(Block& b) {
  b.allow({"trigger", "rate", "growth", "kernel", "variability"});
  ModelSpec m;
  const std::string trigger = b.require<std::string>("trigger");
  if (trigger == "age") m.trigger = Trigger::age;
  else if (trigger == "size") m.trigger = Trigger::size;
  else if (trigger == "increment") m.trigger = Trigger::increment;
  else throw ValidationError("config key '" + b.key("trigger") + "': expected age, size or increment");
  json rate;
  m.rate = parse_rate(b.raw("rate"), b.key("rate"), rate);
  b.out["rate"] = rate;
  Block g = b.child("growth");
  m.growth = parse_growth(g);
  b.out["growth"] = g.out;
  json kernel;
  m.kernel = parse_kernel(b.raw("kernel"), b.key("kernel"), kernel);
  b.out["kernel"] = kernel;
  Block v = b.child("variability");
  v.allow({"growth_cv"});
  double cv = v.get<double>("growth_cv", 0.0);
  if (cv < 0.0) throw ValidationError("config key '" + v.key("growth_cv") + "': must be nonnegative");
  v.finish();
  b.out["variability"] = v.out;
  if (cv > 0.0) m.variability = GrowthVariability{m.growth.is_exponential() ? m.growth.kappa() : 1.0, cv};
  b.finish();
  return m;
}

SchemeConfig parse_scheme(Block& b, Trigger trigger) {
  b.allow({"type", "n", "T", "replicates", "live_cap", "root"});
  SchemeConfig s;
  const std::string type = b.require<std::string>("type");
  Scheme sc = scheme_from_name(type);
  if (sc == Scheme::U1) s.request = SchemeRequest::U1(b.require<std::size_t>("n"));
  else s.request = {sc, b.positive("T")};
  s.replicates = b.get<std::size_t>("replicates", 1);
  if (s.replicates == 0) throw ValidationError("config key '" + b.key("replicates") + "': must be at least 1");
  s.live_cap = b.get<std::size_t>("live_cap", kDefaultLiveCap);
  Block root = b.child("root");
  root.allow({"size", "birth_time", "warm_start"});
  s.root.size_birth = root.positive("size", 1.0);
  s.root.birth_time = root.get<double>("birth_time", 0.0);
  // Timer sizes drift without bound under exponential growth, so there is no stationary size to warm up to.
  s.warm_start = root.get<bool>("warm_start", trigger != Trigger::age);
  root.finish();
  b.out["root"] = root.out;
  b.finish();
  return s;
}

EstimatorConfig parse_estimator(Block& b) {
  static const std::set<std::string> kinds = {"age_genealogical",        "age_population",
                                              "age_pointdata",           "size_genealogical",
                                              "size_dynamics",           "size_pointdata",
                                              "increment_genealogical",  "increment_population",
                                              "increment_from_size_marginal"};
  b.allow({"kind", "kernel", "order", "bandwidth", "lambda", "kappa", "T", "k", "varpi", "smoothness", "range",
           "grid_points", "cutoff", "points_per_octave", "x_bar"});
  EstimatorConfig e;
  e.kind = b.require<std::string>("kind");
  if (!kinds.count(e.kind)) {
    std::string list;
    for (const auto& k : kinds) list += (list.empty() ? "" : ", ") + k;
    throw ValidationError("config key '" + b.key("kind") + "': unknown estimator '" + e.kind + "' (" + list + ")");
  }
  e.kernel = b.get<std::string>("kernel", e.kernel);
  if (e.kernel != "biweight" && e.kernel != "order4" && e.kernel != "box")
    throw ValidationError("config key '" + b.key("kernel") + "': expected biweight, order4 or box");
  e.order = b.get<int>("order", 0);
  if (const json* bw = b.raw("bandwidth")) {
    if (bw->is_number()) {
      e.h = bw->get<double>();
      if (!(e.h > 0.0)) throw ValidationError("config key '" + b.key("bandwidth") + "': must be positive");
      b.out["bandwidth"] = e.h;
    } else if (bw->is_string()) {
      e.bandwidth_method = bw->get<std::string>();
      if (e.bandwidth_method != "rule_of_thumb" && e.bandwidth_method != "cross_validation" &&
          e.bandwidth_method != "comparison" && e.bandwidth_method != "auto")
        throw ValidationError("config key '" + b.key("bandwidth") +
                              "': expected a number or rule_of_thumb, cross_validation, comparison, auto");
      b.out["bandwidth"] = e.bandwidth_method;
    } else {
      throw ValidationError("config key '" + b.key("bandwidth") + "': expected a number or a method name");
    }
  } else {
    b.out["bandwidth"] = e.bandwidth_method;
  }
  e.lambda = b.opt<double>("lambda");
  e.kappa = b.opt<double>("kappa");
  e.horizon = b.opt<double>("T");
  e.k = b.get<int>("k", 0);
  if (e.k != 0 && e.k != 1 && e.k != 2) throw ValidationError("config key '" + b.key("k") + "': expected 1 or 2");
  e.varpi = b.get<double>("varpi", 0.0);
  e.smoothness = b.get<double>("smoothness", e.smoothness);
  e.range = parse_range(b, "range");
  e.grid_points = b.get<std::size_t>("grid_points", e.grid_points);
  if (e.grid_points < 2) throw ValidationError("config key '" + b.key("grid_points") + "': needs at least 2");
  e.cutoff = b.get<double>("cutoff", 0.0);
  e.points_per_octave = b.get<int>("points_per_octave", e.points_per_octave);
  e.x_bar = b.get<double>("x_bar", 0.0);
  b.finish();
  return e;
}

EigenConfig parse_eigen(Block& b) {
  b.allow({"k", "n", "points_per_octave", "x_min", "x_max", "max_steps", "tol"});
  EigenConfig e;
  e.k = b.get<int>("k", 2);
  if (e.k != 1 && e.k != 2) throw ValidationError("config key '" + b.key("k") + "': expected 1 or 2");
  e.n = b.get<std::size_t>("n", e.n);
  e.points_per_octave = b.get<int>("points_per_octave", e.points_per_octave);
  e.x_min = b.opt<double>("x_min");
  e.x_max = b.opt<double>("x_max");
  e.max_steps = b.get<std::size_t>("max_steps", e.max_steps);
  e.tol = b.get<double>("tol", e.tol);
  b.finish();
  return e;
}

CompareConfig parse_compare(Block& b) {
  b.allow({"models", "metric", "metric_bandwidth", "growth_cv", "septum_cv", "lambda", "kappa", "bandwidth",
           "tail_quantile", "points_per_octave", "n_monte_carlo", "n_model_chain", "stationarity_threshold"});
  CompareConfig c;
  std::vector<std::string> names;
  for (ModelType t : c.models) names.push_back(model_type_name(t));
  if (const json* m = b.raw("models")) {
    if (!m->is_array() || m->empty() || !std::all_of(m->begin(), m->end(), [](const json& e) { return e.is_string(); }))
      throw ValidationError("config key '" + b.key("models") + "': expected a nonempty list of model names");
    names = m->get<std::vector<std::string>>();
    c.models.clear();
    for (const auto& n : names) c.models.push_back(model_type_from_name(n));
  }
  b.out["models"] = names;
  CompareOptions& o = c.options;
  o.metric.metric = metric_from_name(b.get<std::string>("metric", metric_name(o.metric.metric)));
  o.metric.h = b.positive("metric_bandwidth", o.metric.h);
  o.variability.growth_cv = b.get<double>("growth_cv", 0.0);
  o.variability.septum_cv = b.get<double>("septum_cv", 0.0);
  if (o.variability.growth_cv < 0.0 || o.variability.septum_cv < 0.0 || o.variability.septum_cv >= 1.0)
    throw ValidationError("config key '" + b.key("growth_cv") + "'/'" + b.key("septum_cv") + "': out of range");
  o.calibration.lambda = b.opt<double>("lambda");
  o.calibration.kappa = b.opt<double>("kappa");
  o.calibration.h = b.get<double>("bandwidth", 0.0);
  o.calibration.tail_quantile = b.get<double>("tail_quantile", o.calibration.tail_quantile);
  o.points_per_octave = b.get<int>("points_per_octave", o.points_per_octave);
  o.n_monte_carlo = b.get<std::size_t>("n_monte_carlo", o.n_monte_carlo);
  o.n_model_chain = b.get<std::size_t>("n_model_chain", o.n_model_chain);
  o.stationarity_threshold = b.get<double>("stationarity_threshold", o.stationarity_threshold);
  b.finish();
  return c;
}

fs::path absolute_from(const fs::path& base, const fs::path& p) {
  if (p.is_absolute()) return p.lexically_normal();
  return fs::absolute(base.empty() ? p : base / p).lexically_normal();
}

}  // namespace

RateFunction rate_from_json(const json& j, const std::string& path) {
  json out;
  return parse_rate(&j, path, out);
}

RunConfig parse_config(const std::string& text, Command command, const std::string& source, const fs::path& base_dir,
                       const CliOverrides& ov) {
  json doc;
  try {
    doc = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string msg = e.what();
    auto pos = msg.find("syntax error");
    throw ValidationError(source + " line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                          (pos == std::string::npos ? msg : msg.substr(pos)));
  }
  if (!doc.is_object()) throw ValidationError(source + ": the config must be a JSON object");

  RunConfig cfg;
  cfg.command = command;
  Block top(&doc, "");
  try {
    top.allow({"command", "seed", "workers", "output", "data", "model", "scheme", "estimator", "eigen", "compare",
               "truth"});
    if (auto c = top.opt<std::string>("command"); c && command_from_name(*c) != command)
      throw ValidationError("config key 'command': the file is for '" + *c + "' but '" + command_name(command) +
                            "' was requested");
    top.out["command"] = command_name(command);
    cfg.seed = top.get<std::uint64_t>("seed", 1);
    if (ov.seed) cfg.seed = *ov.seed;
    top.out["seed"] = cfg.seed;
    cfg.workers = top.get<unsigned>("workers", 0);

    fs::path output = top.get<std::string>("output", "divrate_out");
    cfg.output = ov.output ? fs::absolute(*ov.output).lexically_normal() : absolute_from(base_dir, output);
    top.out["output"] = cfg.output.string();

    auto data = top.opt<std::string>("data");
    if (ov.data) cfg.data = fs::absolute(*ov.data).lexically_normal();
    else if (data) cfg.data = absolute_from(base_dir, *data);
    top.out["data"] = cfg.data.empty() ? json(nullptr) : json(cfg.data.string());

    Block model = top.child("model");
    if (model.present()) {
      cfg.model = parse_model(model);
      top.out["model"] = model.out;
    }
    Block scheme = top.child("scheme");
    if (scheme.present()) {
      cfg.scheme = parse_scheme(scheme, cfg.model ? cfg.model->trigger : Trigger::age);
      top.out["scheme"] = scheme.out;
    }
    Block est = top.child("estimator");
    if (est.present()) {
      cfg.estimator = parse_estimator(est);
      top.out["estimator"] = est.out;
    }
    Block eig = top.child("eigen");
    cfg.eigen = parse_eigen(eig);
    if (eig.present() || command == Command::eigen) top.out["eigen"] = eig.out;
    Block cmp = top.child("compare");
    cfg.compare = parse_compare(cmp);
    cfg.compare.options.seed = cfg.seed;
    cfg.compare.options.workers = cfg.workers;
    if (cmp.present() || command == Command::compare) top.out["compare"] = cmp.out;
    Block truth = top.child("truth");
    if (truth.present()) {
      truth.allow({"rate", "window"});
      json r;
      cfg.truth = parse_rate(truth.raw("rate"), truth.key("rate"), r);
      truth.out["rate"] = r;
      cfg.truth_window = parse_range(truth, "window");
      truth.finish();
      top.out["truth"] = truth.out;
    }
    top.finish();

    switch (command) {
      case Command::simulate:
        if (!cfg.model) throw ValidationError("config: 'simulate' needs a 'model' block");
        if (!scheme.present()) throw ValidationError("config: 'simulate' needs a 'scheme' block");
        break;
      case Command::eigen:
        if (!cfg.model) throw ValidationError("config: 'eigen' needs a 'model' block");
        break;
      case Command::estimate:
        if (!est.present()) throw ValidationError("config: 'estimate' needs an 'estimator' block");
        [[fallthrough]];
      case Command::compare:
        if (cfg.data.empty()) throw ValidationError("config: missing key 'data' (or pass --data)");
        break;
    }
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  cfg.resolved = top.out;
  return cfg;
}

RunConfig load_config(const fs::path& path, Command command, const CliOverrides& ov) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), command, path.string(), fs::absolute(path).parent_path(), ov);
}

// ---------------------------------------------------------------- commands

namespace {

//! Runs one named operation; failures other than validation become numerical failures naming it.
template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError&) {
    throw;
  } catch (const fs::filesystem_error& e) {
    throw ValidationError(std::string(name) + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(name) + ": " + e.what());
  } catch (const std::exception& e) {
    throw NumericalError(std::string(name) + ": " + e.what());
  }
}

void start(const RunConfig& cfg, CommandOutput& out) {
  fs::create_directories(cfg.output);
  fs::path p = cfg.output / "resolved_config.json";
  write_json(p, cfg.resolved);
  out.files.push_back(p);
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string replicate_name(std::size_t r, std::size_t total) {
  std::string s = std::to_string(r);
  std::size_t width = std::max<std::size_t>(3, std::to_string(total - 1).size());
  return "samples_" + std::string(width - std::min(width, s.size()), '0') + s + ".csv";
}

}  // namespace

CommandOutput cmd_simulate(const RunConfig& cfg) {
  if (!cfg.model) throw ValidationError("simulate: no model");
  CommandOutput out;
  start(cfg, out);
  const ModelSpec& spec = *cfg.model;
  const SchemeConfig& sc = cfg.scheme;
  struct Rep {
    fs::path file;
    std::size_t records = 0, censored = 0, divided = 0;
    bool truncated = false;
    std::optional<double> lambda;
  };
  std::vector<Rep> reps(sc.replicates);
  stage("simulate", [&] {
    parallel_for(sc.replicates, worker_count(cfg.workers), [&](std::size_t r) {
      RngStream rng(cfg.seed, r);
      Root root = sc.root;
      if (sc.warm_start) root.size_birth = stationary_birth_size(spec, root.size_birth, rng);
      SampleSet set;
      Rep& rep = reps[r];
      if (sc.request.scheme == Scheme::U1) {
        set = simulate_tree(spec, sc.request, root, rng, sc.live_cap);
      } else {
        const double T = sc.request.parameter;
        Population p = simulate_population(spec, T, root, rng, sc.live_cap);
        rep.divided = p.divided.records.size();
        if (rep.divided >= 8) {
          try {
            rep.lambda = estimate_lambda(p.divided, 0.5 * T, T).lambda;
          } catch (const std::exception&) {
          }
        }
        set = sc.request.scheme == Scheme::U2 ? std::move(p.divided) : std::move(p.alive);
      }
      rep.records = set.records.size();
      rep.censored = set.censored;
      rep.truncated = set.truncated;
      rep.file = cfg.output / replicate_name(r, sc.replicates);
      write_sample_csv(rep.file, set);
    });
  });

  json summary;
  summary["command"] = "simulate";
  summary["scheme"] = scheme_name(sc.request.scheme);
  summary["parameter"] = sc.request.parameter;
  summary["seed"] = cfg.seed;
  json list = json::array();
  std::size_t total = 0;
  double lsum = 0.0;
  std::size_t lcount = 0;
  for (std::size_t r = 0; r < reps.size(); ++r) {
    const Rep& rep = reps[r];
    json e;
    e["replicate"] = r;
    e["file"] = rep.file.filename().string();
    e["records"] = rep.records;
    e["censored"] = rep.censored;
    e["truncated"] = rep.truncated;
    if (sc.request.scheme != Scheme::U1) e["divided"] = rep.divided;
    e["lambda_hat"] = rep.lambda ? json(*rep.lambda) : json(nullptr);
    if (rep.lambda) lsum += *rep.lambda, ++lcount;
    total += rep.records;
    list.push_back(e);
    out.files.push_back(rep.file);
  }
  summary["replicates"] = list;
  summary["total_records"] = total;
  summary["lambda_hat_mean"] = lcount ? json(lsum / static_cast<double>(lcount)) : json(nullptr);
  fs::path sp = cfg.output / "summary.json";
  write_json(sp, summary);
  out.files.push_back(sp);
  std::string line = "simulate: " + std::to_string(reps.size()) + " replicate(s), " + std::to_string(total) +
                     " records";
  if (lcount) line += ", lambda_hat " + fmt(lsum / static_cast<double>(lcount));
  out.lines.push_back(line);
  return out;
}

CommandOutput cmd_eigen(const RunConfig& cfg) {
  if (!cfg.model) throw ValidationError("eigen: no model");
  CommandOutput out;
  start(cfg, out);
  const ModelSpec& m = *cfg.model;
  const EigenConfig& e = cfg.eigen;
  EigenTriplet t;
  std::string solver;
  switch (m.trigger) {
    case Trigger::age:
      solver = "renewal";
      t = stage("renewal_eigen", [&] { return renewal_eigen(m.rate, e.k, e.n); });
      break;
    case Trigger::size: {
      solver = "growth_fragmentation";
      SolverGrid g = default_size_grid(m.rate, e.points_per_octave);
      SolverGrid grid = SolverGrid::geometric(e.x_min.value_or(g.x_min), e.x_max.value_or(g.x_max), e.points_per_octave);
      t = stage("gf_eigen", [&] { return gf_eigen(m.rate, m.growth, m.kernel, e.k, grid, e.max_steps, e.tol); });
      break;
    }
    case Trigger::increment: {
      solver = "two_variable";
      if (!m.growth.is_exponential() || !m.kernel.is_mitosis())
        throw ValidationError("eigen: the increment model is solved for exponential growth with equal mitosis only");
      double hi = 1.0;
      while (m.rate.cumulative(0.0, hi) < 40.0) hi *= 2.0;
      SolverGrid grid = SolverGrid::geometric(e.x_min.value_or(hi * std::exp2(-10.0)), e.x_max.value_or(2.0 * hi),
                                              e.points_per_octave);
      t = stage("adder_steady", [&] { return adder_steady(m.rate, m.growth.kappa(), e.k, grid, e.max_steps, e.tol); });
      break;
    }
  }
  json j = eigen_json(t);
  j["solver"] = solver;
  json warnings = json::array();
  if (t.oscillatory)
    warnings.push_back("equal mitosis with exponential growth: rotating modes share the dominant growth rate; the "
                       "triplet is averaged over one period ln 2 / kappa");
  j["warnings"] = warnings;
  fs::path csv = cfg.output / "eigen.csv", js = cfg.output / "eigen.json";
  write_eigen_csv(csv, t);
  write_json(js, j);
  out.files.push_back(csv);
  out.files.push_back(js);
  out.lines.push_back("eigen (" + solver + "): lambda " + fmt(t.lambda, 12) +
                      (t.lambda > 0.0 ? ", doubling time " + fmt(std::log(2.0) / t.lambda) : std::string()));
  for (const auto& w : warnings) out.lines.push_back("warning: " + w.get<std::string>());
  return out;
}

namespace {

KernelSpec make_kernel(const EstimatorConfig& e) {
  KernelSpec K = e.kernel == "order4" ? KernelSpec::order4() : e.kernel == "box" ? KernelSpec::box() : KernelSpec::biweight();
  if (e.order > K.order()) K = KernelSpec::corrected(K, e.order);
  return K;
}

std::vector<double> finite_values(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  return v;
}

struct EstimateRun {
  EstimationResult result;
  std::size_t n = 0;
  json inputs = json::object();
};

EstimateRun run_estimator(const SampleSet& d, const EstimatorConfig& e) {
  const std::string& kind = e.kind;
  auto need_scheme = [&](std::initializer_list<Scheme> ok, const char* what) {
    if (std::find(ok.begin(), ok.end(), d.scheme) == ok.end())
      throw ValidationError("estimator '" + kind + "' needs " + what + "; the data are " + scheme_name(d.scheme));
  };
  auto need_sizes = [&] {
    if (!d.has_sizes)
      throw ValidationError("estimator '" + kind + "' needs size columns (size_birth, size_division or size_at_T); the data have none");
  };
  auto lambda = [&]() -> double {
    if (e.lambda) return *e.lambda;
    if (d.scheme == Scheme::U2) {
      double T = e.horizon.value_or(d.parameter);
      return stage("estimate_lambda", [&] { return estimate_lambda(d, 0.5 * T, T).lambda; });
    }
    throw ValidationError("estimator '" + kind + "' needs the Malthus parameter: set estimator.lambda (" +
                          scheme_name(d.scheme) + " data carry no population count series)");
  };
  auto kappa = [&]() -> double {
    if (e.kappa) return *e.kappa;
    bool observed = d.has_sizes && std::any_of(d.records.begin(), d.records.end(), [](const CellRecord& r) {
                      return r.lifetime > 0.0 && r.size_division > r.size_birth;
                    });
    if (!observed)
      throw ValidationError("estimator '" + kind + "' needs the growth rate: set estimator.kappa (no divided cells "
                            "with sizes to estimate it from)");
    return estimate_growth_rate(d);
  };
  const KernelSpec K = make_kernel(e);
  auto bandwidth = [&](const std::vector<double>& sample, std::optional<double> lower) {
    if (e.h > 0.0) return e.h;
    BandwidthMethod m = e.bandwidth_method == "cross_validation" ? BandwidthMethod::cross_validation
                        : e.bandwidth_method == "comparison"     ? BandwidthMethod::comparison
                                                                 : BandwidthMethod::rule_of_thumb;
    return stage("select_bandwidth", [&] { return select_bandwidth(sample, K, m, lower); });
  };
  auto grid_for = [&](const std::vector<double>& lo_sample, const std::vector<double>& hi_sample, bool from_zero) {
    if (e.range) return num::linspace((*e.range)[0], (*e.range)[1], e.grid_points);
    double lo = from_zero ? 0.0 : num::quantile(lo_sample, 0.005);
    return num::linspace(lo, num::quantile(hi_sample, 0.995), e.grid_points);
  };
  auto nonempty = [&](const std::vector<double>& v, const char* what) {
    if (v.empty()) throw ValidationError("estimator '" + kind + "': no " + what + " in the data");
  };

  EstimateRun run;
  if (kind == "age_genealogical") {
    need_scheme({Scheme::U1}, "genealogical (U1) data");
    auto life = finite_values(observable(d, Observable::lifetimes));
    nonempty(life, "lifetimes");
    double h = bandwidth(life, 0.0);
    run.result = stage("estimate_B_age_genealogical",
                       [&] { return estimate_B_age_genealogical(life, K, h, grid_for(life, life, true), 0.0); });
    run.n = life.size();
  } else if (kind == "age_population") {
    need_scheme({Scheme::U2}, "population (U2) data");
    auto life = finite_values(observable(d, Observable::lifetimes));
    nonempty(life, "lifetimes");
    const double T = e.horizon.value_or(d.parameter), lam = lambda();
    run.result = stage("estimate_B_age_population", [&] {
      return estimate_B_age_population(life, T, lam, K, e.smoothness, e.h, grid_for(life, life, true));
    });
    run.n = life.size();
    run.inputs["T"] = T;
  } else if (kind == "age_pointdata") {
    need_scheme({Scheme::VT}, "snapshot (VT) data");
    auto ages = finite_values(observable(d, Observable::ages_at_T));
    nonempty(ages, "ages at T");
    const double lam = lambda();
    double h = bandwidth(ages, 0.0);
    run.result = stage("estimate_B_age_pointdata", [&] {
      return estimate_B_age_pointdata(ages, lam, K, h, e.varpi, grid_for(ages, ages, true));
    });
    run.n = ages.size();
  } else if (kind == "size_genealogical") {
    need_scheme({Scheme::U1}, "genealogical (U1) data");
    need_sizes();
    auto birth = finite_values(observable(d, Observable::birth_sizes));
    auto div = finite_values(observable(d, Observable::division_sizes));
    if (birth.size() < 2) throw ValidationError("estimator 'size_genealogical' needs at least two generations");
    double h = bandwidth(birth, std::nullopt);
    run.result = stage("estimate_B_size_genealogical",
                       [&] { return estimate_B_size_genealogical(d, K, h, e.varpi, grid_for(birth, div, false)); });
    run.n = birth.size() - 1;
  } else if (kind == "size_dynamics") {
    need_scheme({Scheme::U1, Scheme::U2}, "genealogical or population data");
    need_sizes();
    auto birth = finite_values(observable(d, Observable::birth_sizes));
    auto div = finite_values(observable(d, Observable::division_sizes));
    nonempty(div, "division sizes");
    const int k = e.k ? e.k : (d.scheme == Scheme::U1 ? 1 : 2);
    const double lam = k == 1 ? 0.0 : lambda();
    const GrowthLaw tau = GrowthLaw::exponential(kappa());
    double h = bandwidth(div, std::nullopt);
    run.result = stage("estimate_B_size_dynamics", [&] {
      return estimate_B_size_dynamics(div, birth, k, lam, tau, K, h, grid_for(birth, div, false));
    });
    run.n = div.size();
    run.inputs["k"] = k;
    run.inputs["kappa"] = tau.kappa();
  } else if (kind == "size_pointdata") {
    need_scheme({Scheme::VT}, "snapshot (VT) data");
    need_sizes();
    auto sizes = finite_values(observable(d, Observable::sizes_at_T));
    nonempty(sizes, "sizes at T");
    SizePointOptions o;
    o.lambda = lambda();
    o.tau = GrowthLaw::exponential(kappa());
    o.k = e.k ? e.k : 2;
    if (e.varpi > 0.0) o.varpi = e.varpi;
    o.x_bar = e.x_bar;
    o.points_per_octave = e.points_per_octave;
    double h = bandwidth(sizes, std::nullopt);
    run.result = stage("estimate_B_size_pointdata", [&] { return estimate_B_size_pointdata(sizes, o, K, h); });
    run.n = sizes.size();
    run.inputs["kappa"] = o.tau.kappa();
  } else if (kind == "increment_genealogical") {
    need_scheme({Scheme::U1}, "genealogical (U1) data");
    need_sizes();
    auto inc = finite_values(observable(d, Observable::increments));
    auto birth = finite_values(observable(d, Observable::birth_sizes));
    nonempty(inc, "increments");
    double h = bandwidth(inc, 0.0);
    run.result = stage("estimate_B_increment_genealogical", [&] {
      return estimate_B_increment_genealogical(inc, K, h, birth.size() == inc.size() ? birth : std::vector<double>{},
                                               grid_for(inc, inc, true));
    });
    run.n = inc.size();
  } else if (kind == "increment_population") {
    need_scheme({Scheme::U2}, "population (U2) data");
    need_sizes();
    auto inc = finite_values(observable(d, Observable::increments));
    auto div = finite_values(observable(d, Observable::division_sizes));
    nonempty(inc, "increments");
    if (div.size() != inc.size()) throw ValidationError("estimator 'increment_population': incomplete size columns");
    double h = bandwidth(inc, 0.0);
    run.result = stage("estimate_B_increment_population", [&] {
      return estimate_B_increment_population(inc, div, K, h, grid_for(inc, inc, true));
    });
    run.n = inc.size();
  } else {  // increment_from_size_marginal
    need_scheme({Scheme::VT}, "snapshot (VT) data");
    need_sizes();
    auto sizes = finite_values(observable(d, Observable::sizes_at_T));
    nonempty(sizes, "sizes at T");
    MarginalDeconvolutionOptions o;
    o.kappa = kappa();
    o.k = e.k ? e.k : 2;
    o.cutoff = e.cutoff;
    o.points_per_octave = e.points_per_octave;
    if (e.range) o.z_max = (*e.range)[1];
    double h = bandwidth(sizes, std::nullopt);
    run.result = stage("estimate_B_increment_from_size_marginal",
                       [&] { return estimate_B_increment_from_size_marginal(sizes, K, h, o); });
    run.n = sizes.size();
    run.inputs["kappa"] = o.kappa;
  }
  return run;
}

}  // namespace

CommandOutput cmd_estimate(const RunConfig& cfg) {
  CommandOutput out;
  start(cfg, out);
  SampleSet d = stage("ingest", [&] { return ingest_lineage_csv(cfg.data); });
  EstimateRun run = run_estimator(d, cfg.estimator);
  const EstimationResult& r = run.result;

  json j;
  j["estimator"] = cfg.estimator.kind;
  j["data"] = {{"file", cfg.data.string()}, {"scheme", scheme_name(d.scheme)}, {"records", d.records.size()},
               {"observations", run.n}};
  j["inputs"] = run.inputs;
  j["result"] = estimate_json(r);

  std::string line = "estimate " + cfg.estimator.kind + ": n=" + std::to_string(run.n) + ", h=" + fmt(r.h);
  const RateFunction* truth = cfg.truth ? &*cfg.truth : nullptr;
  if (truth) {
    const auto& x = r.estimate.x;
    double lo = x.front(), hi = x.back();
    if (cfg.truth_window) {
      lo = (*cfg.truth_window)[0];
      hi = (*cfg.truth_window)[1];
    } else {
      std::size_t a = 0, b = x.size();
      while (a < x.size() && a < r.flags.size() && r.flags[a]) ++a;
      while (b > a + 1 && b - 1 < r.flags.size() && r.flags[b - 1]) --b;
      if (a < b) lo = x[a], hi = x[b - 1];
    }
    std::vector<double> xs, diff, abs_diff, sq, tsq;
    double sup = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] < lo || x[i] > hi) continue;
      double t = (*truth)(x[i]), v = r.estimate.values[i] - t;
      xs.push_back(x[i]);
      abs_diff.push_back(std::abs(v));
      sq.push_back(v * v);
      tsq.push_back(t * t);
      sup = std::max(sup, std::abs(v));
    }
    json tj;
    tj["window"] = {lo, hi};
    tj["points"] = xs.size();
    if (xs.size() >= 2) {
      double l1 = num::trapezoid(xs, abs_diff), l2 = std::sqrt(num::trapezoid(xs, sq)),
             tn = std::sqrt(num::trapezoid(xs, tsq));
      tj["sup_error"] = sup;
      tj["l1_error"] = l1;
      tj["l2_error"] = l2;
      tj["relative_l2_error"] = tn > 0.0 ? json(l2 / tn) : json(nullptr);
      out.lines.push_back("error vs truth on [" + fmt(lo) + ", " + fmt(hi) + "]: sup " + fmt(sup) + ", L1 " + fmt(l1) +
                          ", L2 " + fmt(l2) + (tn > 0.0 ? ", relative L2 " + fmt(l2 / tn) : std::string()));
    }
    j["truth"] = tj;
  }
  fs::path csv = cfg.output / "estimate.csv", js = cfg.output / "estimate.json";
  write_estimate_csv(csv, r, truth);
  write_json(js, j);
  out.files.push_back(csv);
  out.files.push_back(js);
  out.lines.insert(out.lines.begin(), line);
  return out;
}

CommandOutput cmd_compare(const RunConfig& cfg) {
  CommandOutput out;
  start(cfg, out);
  SampleSet d = stage("ingest", [&] { return ingest_lineage_csv(cfg.data); });
  ComparisonReport rep = stage("rank_models", [&] { return rank_models(d, cfg.compare.models, cfg.compare.options); });
  fs::path js = cfg.output / "comparison.json", cc = cfg.output / "correlations.csv", mc = cfg.output / "marginals.csv";
  json j = comparison_json(rep);
  j["data"] = {{"file", cfg.data.string()}, {"records", d.records.size()}};
  write_json(js, j);
  write_correlation_csv(cc, rep);
  write_marginals_csv(mc, rep);
  out.files.insert(out.files.end(), {js, cc, mc});
  std::string line = "ranking (" + rep.ranking_basis + "):";
  for (std::size_t i = 0; i < rep.ranking.size(); ++i) {
    const ModelReport& m = rep.models[rep.ranking[i]];
    line += (i ? " < " : " ") + model_type_name(m.model.type);
    if (m.degenerate) line += " (degenerate)";
    else if (rep.data_stationary) line += " " + fmt(m.distance, 4);
    else line += " " + fmt(m.correlation_deviation, 4);
  }
  out.lines.push_back(line);
  return out;
}

CommandOutput run_command(const RunConfig& cfg) {
  switch (cfg.command) {
    case Command::simulate:
      return cmd_simulate(cfg);
    case Command::eigen:
      return cmd_eigen(cfg);
    case Command::estimate:
      return cmd_estimate(cfg);
    case Command::compare:
      return cmd_compare(cfg);
  }
  return {};
}

// ---------------------------------------------------------------- command line

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Division-rate models: simulation, eigenproblems, estimation and model comparison", "divrate"};
  app.require_subcommand(1, 1);
  std::string config, output, data;
  std::uint64_t seed = 0;
  const std::vector<std::pair<Command, std::string>> commands = {
      {Command::simulate, "Simulate lineage trees and write one CSV per replicate"},
      {Command::eigen, "Compute the dominant eigenelements of a model"},
      {Command::estimate, "Estimate a division rate from a lineage CSV"},
      {Command::compare, "Calibrate and rank timer, sizer and adder models on a lineage CSV"}};
  std::vector<CLI::App*> subs;
  for (const auto& [c, desc] : commands) {
    CLI::App* sc = app.add_subcommand(command_name(c), desc);
    sc->add_option("-c,--config", config, "JSON run configuration")->required();
    sc->add_option("--seed", seed, "Random seed (overrides the config)");
    sc->add_option("--out", output, "Output directory (overrides the config)");
    if (c == Command::estimate || c == Command::compare)
      sc->add_option("--data", data, "Lineage CSV (overrides the config)");
    subs.push_back(sc);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  Command cmd = Command::simulate;
  CLI::App* active = nullptr;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) cmd = commands[i].first, active = subs[i];

  CliOverrides ov;
  if (active->count("--seed")) ov.seed = seed;
  if (active->count("--out")) ov.output = output;
  if (!data.empty()) ov.data = data;
  try {
    RunConfig cfg = load_config(config, cmd, ov);
    CommandOutput res = run_command(cfg);
    for (const auto& l : res.lines) out << l << '\n';
    out << "wrote " << res.files.size() << " file(s) to " << cfg.output.string() << '\n';
    return 0;
  } catch (const ValidationError& e) {
    err << "divrate: validation error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "divrate: validation error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "divrate: numerical failure in " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "divrate: numerical failure in " << command_name(cmd) << ": " << e.what() << '\n';
    return 2;
  }
}

}  // namespace divrate
