#include "divrate/compare.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <thread>
#include <unordered_map>

#include <boost/math/distributions/beta.hpp>

#include "divrate/estimators.hpp"
#include "divrate/numerics.hpp"
#include "divrate/simulate.hpp"
#include "divrate/smoothing.hpp"

namespace divrate {

unsigned worker_count(unsigned requested) {
  unsigned n = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DIVRATE_WORKERS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::min(n, static_cast<unsigned>(v));
  }
  return n;
}

void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t c; (c = next++) < n;) {
      try {
        fn(c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const unsigned w = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(n, 1)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < w; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

bool divided(const CellRecord& r) { return r.lifetime > 0.0; }
bool sized(const CellRecord& r) { return r.size_birth > 0.0 && r.size_division > r.size_birth; }

std::vector<double> field(const SampleSet& s, double CellRecord::*f, bool need_sizes) {
  std::vector<double> v;
  v.reserve(s.records.size());
  for (const auto& r : s.records)
    if (divided(r) && (!need_sizes || sized(r))) v.push_back(r.*f);
  return v;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

// Turns a hazard estimate into a simulation rate: the table stops at the last grid point, where the value is
// replaced by the mean of the positive estimates over the top tenth so that the constant tail keeps cells dividing.
RateFunction to_rate(const EstimationResult& r, const std::string& who) {
  const auto& g = r.estimate.x;
  std::vector<double> v = r.estimate.values;
  for (double& y : v)
    if (!std::isfinite(y) || y < 0.0) y = 0.0;
  const std::size_t n = v.size(), top = n - std::max<std::size_t>(n / 10, 1);
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = top; i < n; ++i)
    if (v[i] > 0.0) s += v[i], ++c;
  if (c == 0)
    for (std::size_t i = 0; i < n; ++i)
      if (v[i] > 0.0) s += v[i], ++c;
  if (c == 0) throw NumericalError(who + ": fitted rate vanishes on the whole grid");
  v.back() = s / static_cast<double>(c);
  return RateFunction(g, v, TailPolicy::constant_last);
}

double bandwidth(const CalibrationOptions& opt, const std::vector<double>& sample) {
  return opt.h > 0.0 ? opt.h : rule_of_thumb_bandwidth(sample, opt.K.order());
}

std::vector<double> fit_grid(const std::vector<double>& sample, double q, std::size_t n) {
  return num::linspace(0.0, num::quantile(sample, q), n);
}

std::string missing(const SampleSet& d, bool sizes, bool lifetimes) {
  std::string m;
  if (sizes && !d.has_sizes) m += " size_birth size_division";
  if (lifetimes && std::none_of(d.records.begin(), d.records.end(), divided)) m += " lifetime";
  return m;
}

}  // namespace

double estimate_growth_rate(const SampleSet& data) {
  std::vector<double> k;
  for (const auto& r : data.records)
    if (divided(r) && sized(r)) k.push_back(std::log(r.size_division / r.size_birth) / r.lifetime);
  if (k.empty()) throw ValidationError("growth rate: no divided cell with sizes and lifetime");
  return num::quantile(k, 0.5);
}

CalibratedModel calibrate(const SampleSet& data, ModelType type, const CalibrationOptions& opt) {
  const std::string who = "calibrate " + model_type_name(type);
  if (data.records.empty()) throw ValidationError(who + ": empty sample");
  CalibratedModel m;
  m.type = type;
  m.k = data.scheme == Scheme::U1 ? 1 : 2;

  if (data.scheme == Scheme::VT) {
    std::string gap;
    if (!opt.lambda) gap += " lambda";
    if (!opt.kappa && type != ModelType::timer) gap += " kappa";
    if (type != ModelType::timer && !data.has_sizes) gap += " size_at_T";
    if (!gap.empty()) throw ValidationError(who + ": snapshot data needs" + gap);
    m.kappa = opt.kappa.value_or(1.0);
    const double lambda = *opt.lambda;
    std::vector<double> ages, sizes;
    for (const auto& r : data.records) ages.push_back(r.age_at_T), sizes.push_back(r.size_at_T);
    switch (type) {
      case ModelType::timer:
        m.fit = estimate_B_age_pointdata(ages, lambda, opt.K, bandwidth(opt, ages), 0.0,
                                         fit_grid(ages, opt.tail_quantile, opt.grid_points));
        m.estimator = "age_pointdata";
        break;
      case ModelType::sizer: {
        SizePointOptions so;
        so.tau = GrowthLaw::exponential(m.kappa);
        so.lambda = lambda;
        m.fit = estimate_B_size_pointdata(sizes, so, opt.K, bandwidth(opt, sizes));
        m.estimator = "size_pointdata";
        break;
      }
      case ModelType::adder: {
        MarginalDeconvolutionOptions mo;
        mo.kappa = m.kappa;
        mo.z_max = num::quantile(sizes, opt.tail_quantile);
        m.fit = estimate_B_increment_from_size_marginal(sizes, opt.K, bandwidth(opt, sizes), mo);
        m.estimator = "increment_from_size_marginal";
        break;
      }
    }
    m.rate = to_rate(m.fit, who);
    return m;
  }

  const bool need_sizes = type != ModelType::timer;
  std::string gap = missing(data, need_sizes, true);
  if (!gap.empty()) throw ValidationError(who + ": data lacks" + gap);
  if (opt.kappa)
    m.kappa = *opt.kappa;
  else if (data.has_sizes)
    m.kappa = estimate_growth_rate(data);
  else
    m.kappa = 1.0;

  const auto lifetimes = field(data, &CellRecord::lifetime, false);
  const auto births = field(data, &CellRecord::size_birth, true);
  const auto divisions = field(data, &CellRecord::size_division, true);
  const auto increments = field(data, &CellRecord::increment, true);
  if (need_sizes) require(births.size() >= 2, who + ": fewer than two cells with sizes");

  if (data.scheme == Scheme::U1) {
    switch (type) {
      case ModelType::timer:
        m.fit = estimate_B_age_genealogical(lifetimes, opt.K, bandwidth(opt, lifetimes),
                                            fit_grid(lifetimes, opt.tail_quantile, opt.grid_points), 0.0);
        m.estimator = "age_genealogical";
        break;
      case ModelType::sizer:
        m.fit = estimate_B_size_genealogical(data, opt.K, bandwidth(opt, births), 0.0,
                                             fit_grid(divisions, opt.tail_quantile, opt.grid_points));
        m.estimator = "size_genealogical";
        break;
      case ModelType::adder:
        m.fit = estimate_B_increment_genealogical(increments, opt.K, bandwidth(opt, increments), births,
                                                  fit_grid(increments, opt.tail_quantile, opt.grid_points));
        m.estimator = "increment_genealogical";
        break;
    }
  } else {
    double lambda = opt.lambda ? *opt.lambda : estimate_lambda(data, 0.5 * data.parameter, data.parameter).lambda;
    switch (type) {
      case ModelType::timer:
        m.fit = estimate_B_age_population(lifetimes, data.parameter, lambda, opt.K, 2.0, opt.h,
                                          fit_grid(lifetimes, opt.tail_quantile, opt.grid_points));
        m.estimator = "age_population";
        break;
      case ModelType::sizer:
        m.fit = estimate_B_size_dynamics(divisions, births, 2, lambda, GrowthLaw::exponential(m.kappa), opt.K,
                                         bandwidth(opt, divisions),
                                         fit_grid(divisions, opt.tail_quantile, opt.grid_points));
        m.estimator = "size_dynamics";
        break;
      case ModelType::adder:
        m.fit = estimate_B_increment_population(increments, divisions, opt.K, bandwidth(opt, increments),
                                                fit_grid(increments, opt.tail_quantile, opt.grid_points));
        m.estimator = "increment_population";
        break;
    }
    m.fit.lambda = lambda;
  }
  m.rate = to_rate(m.fit, who);
  return m;
}

// ---------------------------------------------------------------- distances

std::string metric_name(Metric m) { return m == Metric::wasserstein1 ? "wasserstein1" : "l2_regularized"; }

Metric metric_from_name(const std::string& s) {
  if (s == "wasserstein1" || s == "W1") return Metric::wasserstein1;
  if (s == "l2_regularized" || s == "L2") return Metric::l2_regularized;
  throw ValidationError("unknown metric '" + s + "' (expected wasserstein1 or l2_regularized)");
}

namespace {

// Piecewise-linear density (zero outside its grid) sampled on the merged knots, with segment masses.
struct Segments {
  std::vector<double> lo, hi;  // density at the two ends of each merged segment
  double mass = 0.0;
};

Segments on_knots(const GridDensity& d, const std::vector<double>& knots) {
  Segments s;
  const std::size_t n = knots.size() - 1;
  s.lo.assign(n, 0.0);
  s.hi.assign(n, 0.0);
  const double a = d.x.front(), b = d.x.back();
  for (std::size_t i = 0; i < n; ++i) {
    if (knots[i] < a || knots[i + 1] > b) continue;
    s.lo[i] = num::interp(d.x, d.values, knots[i]);
    s.hi[i] = num::interp(d.x, d.values, knots[i + 1]);
  }
  for (std::size_t i = 0; i < n; ++i) s.mass += 0.5 * (s.lo[i] + s.hi[i]) * (knots[i + 1] - knots[i]);
  return s;
}

// Integral of |c0 + c1 s + c2 s^2| over [0, L].
double abs_quadratic(double c0, double c1, double c2, double L) {
  std::vector<double> cuts = {0.0, L};
  if (std::abs(c2) > 0.0) {
    double disc = c1 * c1 - 4.0 * c2 * c0;
    if (disc > 0.0) {
      double r = std::sqrt(disc);
      for (double t : {(-c1 - r) / (2.0 * c2), (-c1 + r) / (2.0 * c2)})
        if (t > 0.0 && t < L) cuts.push_back(t);
    }
  } else if (std::abs(c1) > 0.0) {
    double t = -c0 / c1;
    if (t > 0.0 && t < L) cuts.push_back(t);
  }
  std::sort(cuts.begin(), cuts.end());
  auto prim = [&](double t) { return c0 * t + 0.5 * c1 * t * t + c2 * t * t * t / 3.0; };
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) s += std::abs(prim(cuts[i + 1]) - prim(cuts[i]));
  return s;
}

double w1_grid(const GridDensity& d1, const GridDensity& d2) {
  std::vector<double> knots = d1.x;
  knots.insert(knots.end(), d2.x.begin(), d2.x.end());
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
  if (knots.size() < 2) return 0.0;
  Segments a = on_knots(d1, knots), b = on_knots(d2, knots);
  if (!(a.mass > 0.0) || !(b.mass > 0.0)) throw ValidationError("distance: density with no mass");
  double Fa = 0.0, Fb = 0.0, w = 0.0;
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
    const double L = knots[i + 1] - knots[i];
    const double pa0 = a.lo[i] / a.mass, pa1 = a.hi[i] / a.mass;
    const double pb0 = b.lo[i] / b.mass, pb1 = b.hi[i] / b.mass;
    // G(s) = (Fa - Fb) + (pa0 - pb0) s + ((pa1 - pa0) - (pb1 - pb0)) s^2 / (2L)
    w += abs_quadratic(Fa - Fb, pa0 - pb0, ((pa1 - pa0) - (pb1 - pb0)) / (2.0 * L), L);
    Fa += 0.5 * (pa0 + pa1) * L;
    Fb += 0.5 * (pb0 + pb1) * L;
  }
  return w;
}

double bilinear(const GridDensity& d, double x, double y) {
  if (x < d.x.front() || x > d.x.back() || y < d.y.front() || y > d.y.back()) return 0.0;
  const std::size_t ny = d.y.size();
  auto locate = [](const std::vector<double>& g, double t) {
    std::size_t i = static_cast<std::size_t>(std::upper_bound(g.begin(), g.end(), t) - g.begin());
    i = std::clamp<std::size_t>(i, 1, g.size() - 1) - 1;
    double u = g[i + 1] > g[i] ? (t - g[i]) / (g[i + 1] - g[i]) : 0.0;
    return std::pair{i, u};
  };
  auto [i, u] = locate(d.x, x);
  auto [j, v] = locate(d.y, y);
  auto at = [&](std::size_t a, std::size_t b) { return d.values[a * ny + b]; };
  return (1 - u) * ((1 - v) * at(i, j) + v * at(i, j + 1)) + u * ((1 - v) * at(i + 1, j) + v * at(i + 1, j + 1));
}

double l2_1d(const GridDensity& d1, const GridDensity& d2, const DistanceSpec& spec) {
  const double pad = 2.0 * spec.h;
  const double lo = std::min(d1.x.front(), d2.x.front()) - pad, hi = std::max(d1.x.back(), d2.x.back()) + pad;
  const auto g = num::linspace(lo, hi, spec.n_grid);
  auto prep = [&](const GridDensity& d) {
    const double mass = num::trapezoid(d.x, d.values);
    if (!(mass > 0.0)) throw ValidationError("distance: density with no mass");
    std::vector<double> v(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) v[i] = num::interp(d.x, d.values, g[i]) / mass;
    return regularize_noisy_density(GridDensity(g, v), spec.K, spec.h).values;
  };
  const auto a = prep(d1), b = prep(d2);
  std::vector<double> sq(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) sq[i] = (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num::trapezoid(g, sq));
}

double l2_2d(const GridDensity& d1, const GridDensity& d2, const DistanceSpec& spec) {
  const std::size_t n = std::min<std::size_t>(spec.n_grid, 256);
  const auto gx = num::linspace(std::min(d1.x.front(), d2.x.front()), std::max(d1.x.back(), d2.x.back()), n);
  const auto gy = num::linspace(std::min(d1.y.front(), d2.y.front()), std::max(d1.y.back(), d2.y.back()), n);
  auto sample = [&](const GridDensity& d) {
    std::vector<double> v(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) v[i * n + j] = bilinear(d, gx[i], gy[j]);
    return v;
  };
  auto integral = [&](const std::vector<double>& v) {
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i)
      row[i] = num::trapezoid(gy, std::vector<double>(v.begin() + i * n, v.begin() + (i + 1) * n));
    return num::trapezoid(gx, row);
  };
  auto a = sample(d1), b = sample(d2);
  const double ma = integral(a), mb = integral(b);
  if (!(ma > 0.0) || !(mb > 0.0)) throw ValidationError("distance: density with no mass");
  std::vector<double> sq(n * n);
  for (std::size_t c = 0; c < sq.size(); ++c) sq[c] = std::pow(a[c] / ma - b[c] / mb, 2);
  return std::sqrt(integral(sq));
}

}  // namespace

double distance(const GridDensity& d1, const GridDensity& d2, const DistanceSpec& spec) {
  if (d1.dim() != d2.dim()) throw ValidationError("distance: dimension mismatch");
  if (d1.x.empty() || d2.x.empty()) throw ValidationError("distance: empty density");
  if (spec.metric == Metric::wasserstein1) {
    if (d1.dim() != 1) throw ValidationError("distance: Wasserstein-1 is defined for 1D densities only");
    return w1_grid(d1, d2);
  }
  if (!(spec.h > 0.0)) throw ValidationError("distance: L2 metric needs a positive bandwidth");
  return d1.dim() == 1 ? l2_1d(d1, d2, spec) : l2_2d(d1, d2, spec);
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double x = std::min(a[0], b[0]), w = 0.0;
  while (i < a.size() || j < b.size()) {
    double next = j >= b.size() || (i < a.size() && a[i] <= b[j]) ? a[i] : b[j];
    w += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - x);
    x = next;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return w;
}

// ---------------------------------------------------------------- correlations

const std::array<std::string, 6>& CorrelationRow::labels() {
  static const std::array<std::string, 6> l = {"AD/SB", "AD/SD", "AD/ID", "SB/SD", "SB/ID", "SD/ID"};
  return l;
}

CorrelationRow correlation_table(const SampleSet& data) {
  std::array<std::vector<double>, 4> v;  // AD, SB, SD, ID
  if (data.has_sizes)
    for (const auto& r : data.records)
      if (divided(r) && sized(r) && std::isfinite(r.size_division)) {
        v[0].push_back(r.lifetime);
        v[1].push_back(r.size_birth);
        v[2].push_back(r.size_division);
        v[3].push_back(r.increment);
      }
  static constexpr std::array<std::pair<int, int>, 6> pairs = {{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};
  CorrelationRow row;
  for (std::size_t c = 0; c < 6; ++c) {
    double r = num::pearson(v[pairs[c].first], v[pairs[c].second]);
    row.defined[c] = std::isfinite(r);
    row.value[c] = row.defined[c] ? r : std::numeric_limits<double>::quiet_NaN();
  }
  return row;
}

double row_deviation(const CorrelationRow& a, const CorrelationRow& b) {
  double s = 0.0;
  int n = 0;
  for (std::size_t c = 0; c < 6; ++c)
    if (a.defined[c] && b.defined[c]) s += std::abs(a.value[c] - b.value[c]), ++n;
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------- marginals

double lineage_autocorrelation(const SampleSet& data, std::size_t lag) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.records.size(); ++i) index.emplace(data.records[i].id, i);
  std::vector<double> a, b;
  for (const auto& r : data.records) {
    if (!(r.size_birth > 0.0)) continue;
    const CellRecord* anc = &r;
    std::size_t up = 0;
    for (; up < lag; ++up) {
      auto it = index.find(anc->parent);
      if (anc->parent.empty() || it == index.end()) break;
      anc = &data.records[it->second];
    }
    if (up == lag && anc->size_birth > 0.0) {
      a.push_back(std::log(r.size_birth));
      b.push_back(std::log(anc->size_birth));
    }
  }
  return a.size() >= 3 ? num::pearson(a, b) : std::numeric_limits<double>::quiet_NaN();
}

const std::array<std::string, 3>& MarginalSet::labels() {
  static const std::array<std::string, 3> l = {"size", "increment", "age"};
  return l;
}

namespace {

GridDensity from_bins(const std::vector<double>& edges, const std::vector<double>& mass, bool geometric) {
  std::vector<double> x(mass.size()), v(mass.size());
  for (std::size_t j = 0; j < mass.size(); ++j) {
    x[j] = geometric ? std::sqrt(edges[j] * edges[j + 1]) : 0.5 * (edges[j] + edges[j + 1]);
    v[j] = mass[j] / (edges[j + 1] - edges[j]);
  }
  double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (!(total > 0.0)) throw NumericalError("marginal: no mass in the bins");
  for (double& y : v) y /= total;
  GridDensity d(x, v, geometric);
  d.cell_quadrature = true;
  d.refresh_normalization();
  return d;
}

double spread(const GridDensity& d) {
  const auto w = d.cell_widths();
  double m0 = 0.0, m1 = 0.0, m2 = 0.0;
  for (std::size_t j = 0; j < d.x.size(); ++j) {
    double p = d.values[j] * w[j];
    m0 += p, m1 += p * d.x[j], m2 += p * d.x[j] * d.x[j];
  }
  double var = m2 / m0 - (m1 / m0) * (m1 / m0);
  return var > 0.0 ? std::sqrt(var) : 1.0;
}

std::size_t bin_index(const std::vector<double>& edges, double c) {
  auto it = std::upper_bound(edges.begin(), edges.end(), c);
  std::size_t j = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
  return std::min(j, edges.size() - 2);
}

// Adds the weight of the time interval [0, s_max] to the bins of a coordinate increasing in time since birth.
template <class Forward, class Inverse, class Weight>
void deposit(const std::vector<double>& edges, std::vector<double>& mass, double s_max, Forward c, Inverse s_of,
             Weight W) {
  const double c0 = c(0.0), c1 = c(s_max);
  for (std::size_t j = bin_index(edges, c0); j < mass.size(); ++j) {
    const bool last = j + 1 == mass.size();
    const double s0 = std::max(0.0, edges[j] > c0 ? s_of(edges[j]) : 0.0);
    const double s1 = last || edges[j + 1] >= c1 ? s_max : std::min(s_max, s_of(edges[j + 1]));
    if (s1 > s0) mass[j] += W(s0, s1);
    if (edges[j + 1] >= c1) break;
  }
}

struct Edges {
  std::vector<double> size, increment, age;
};

std::vector<double> geometric_edges(double lo, double hi, int m) {
  if (!(hi > lo)) hi = 2.0 * lo;
  const double r = std::exp2(1.0 / m);
  std::vector<double> e = {lo};
  while (e.back() < hi) e.push_back(e.back() * r);
  return e;
}

MarginalSet bin_marginals(const SampleSet& data, double lambda, const Edges& E) {
  std::vector<double> ms(E.size.size() - 1, 0.0), mi(E.increment.size() - 1, 0.0), ma(E.age.size() - 1, 0.0);
  if (data.scheme == Scheme::VT) {
    for (const auto& r : data.records) {
      if (!(r.size_at_T > 0.0)) continue;
      ms[bin_index(E.size, r.size_at_T)] += 1.0;
      mi[bin_index(E.increment, std::max(0.0, r.size_at_T - r.size_birth))] += 1.0;
      ma[bin_index(E.age, r.age_at_T)] += 1.0;
    }
  } else {
    double t_end = data.parameter;
    if (data.scheme == Scheme::U2) {
      double longest = 0.0;
      for (const auto& r : data.records) longest = std::max(longest, r.lifetime);
      if (t_end - longest > 0.0) t_end -= longest;
    }
    for (const auto& r : data.records) {
      if (!divided(r) || !sized(r) || !std::isfinite(r.size_division)) continue;
      const double kap = std::log(r.size_division / r.size_birth) / r.lifetime, xb = r.size_birth;
      double s_max = r.lifetime;
      if (data.scheme == Scheme::U2) {
        if (r.birth_time >= t_end) continue;
        s_max = std::min(s_max, t_end - r.birth_time);
      }
      auto W = [&](double s0, double s1) {
        return lambda > 0.0 ? std::exp(-lambda * (r.birth_time + s0)) * -std::expm1(-lambda * (s1 - s0)) / lambda
                            : s1 - s0;
      };
      deposit(E.size, ms, s_max, [&](double s) { return xb * std::exp(kap * s); },
              [&](double x) { return std::log(x / xb) / kap; }, W);
      deposit(E.increment, mi, s_max, [&](double s) { return xb * std::expm1(kap * s); },
              [&](double z) { return std::log1p(z / xb) / kap; }, W);
      deposit(E.age, ma, s_max, [](double s) { return s; }, [](double a) { return a; }, W);
    }
  }
  MarginalSet out;
  out.size = from_bins(E.size, ms, true);
  out.increment = from_bins(E.increment, mi, false);
  out.age = from_bins(E.age, ma, false);
  out.scale = {spread(out.size), spread(out.increment), spread(out.age)};
  return out;
}

Edges edges_for(const SampleSet& data, int m, std::size_t bins) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0, zmax = 0.0, amax = 0.0;
  for (const auto& r : data.records) {
    if (data.scheme == Scheme::VT) {
      if (!(r.size_at_T > 0.0)) continue;
      lo = std::min(lo, r.size_at_T);
      hi = std::max(hi, r.size_at_T);
      zmax = std::max(zmax, r.size_at_T - r.size_birth);
      amax = std::max(amax, r.age_at_T);
    } else if (divided(r) && sized(r) && std::isfinite(r.size_division)) {
      lo = std::min(lo, r.size_birth);
      hi = std::max(hi, r.size_division);
      zmax = std::max(zmax, r.increment);
      amax = std::max(amax, r.lifetime);
    }
  }
  if (!std::isfinite(lo) || !(hi > 0.0)) throw ValidationError("marginals: no usable sizes");
  if (!(zmax > 0.0)) zmax = 1.0;
  if (!(amax > 0.0)) amax = 1.0;
  Edges E;
  E.size = geometric_edges(lo, hi, m);
  E.increment = num::linspace(0.0, 1.25 * zmax, bins + 1);
  E.age = num::linspace(0.0, 1.25 * amax, bins + 1);
  return E;
}

std::vector<double> edges_of(const GridDensity& d) {
  // Uniform bins: rebuild the edges from the centres.
  const double w = d.x.size() > 1 ? d.x[1] - d.x[0] : 1.0;
  std::vector<double> e(d.x.size() + 1);
  for (std::size_t j = 0; j < d.x.size(); ++j) e[j] = d.x[j] - 0.5 * w;
  e.back() = d.x.back() + 0.5 * w;
  return e;
}

GridDensity standardized(const GridDensity& d, double s) {
  GridDensity o = d;
  for (double& x : o.x) x /= s;
  for (double& v : o.values) v *= s;
  o.refresh_normalization();
  return o;
}

}  // namespace

MarginalSet data_marginals(const SampleSet& data, double lambda, int m, std::size_t bins) {
  if (!data.has_sizes) throw ValidationError("marginals: data has no size columns");
  if (m < 1 || bins < 2) throw ValidationError("marginals: need positive points per octave and >= 2 bins");
  return bin_marginals(data, lambda, edges_for(data, m, bins));
}

GridDensity data_size_marginal(const SampleSet& data, double lambda, int m) {
  return data_marginals(data, lambda, m).size;
}

MarginalSet steady_marginals(const SteadyState& st, double kappa, const MarginalSet& bins) {
  const auto& x = st.size_marginal.x;
  const std::size_t n = x.size();
  if (n < 2 || st.cells.size() != n * (n + 1) / 2) throw ValidationError("steady marginals: state does not match its grid");
  const double r = x[1] / x[0], dt = std::log(r) / kappa;
  static constexpr std::array<double, 4> gu = {0.0694318442029737, 0.3300094782075719, 0.6699905217924281,
                                               0.9305681557970263};
  static constexpr std::array<double, 4> gw = {0.1739274225687269, 0.3260725774312731, 0.3260725774312731,
                                               0.1739274225687269};
  const auto ez = edges_of(bins.increment), ea = edges_of(bins.age);
  std::vector<double> mz(ez.size() - 1, 0.0), ma(ea.size() - 1, 0.0);
  std::array<double, 4> rp{}, rm{};
  for (std::size_t q = 0; q < 4; ++q) rp[q] = std::pow(r, gu[q] - 0.5), rm[q] = std::pow(r, -gu[q]);
  // Birth sizes spread over a step below the column's node (u); each snapshot stands for the half steps around
  // it (v).
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double M = st.cells[i * (i + 1) / 2 + j];
      if (M == 0.0) continue;
      for (std::size_t u = 0; u < 4; ++u)
        for (std::size_t v = 0; v < 4; ++v) {
          const double w = M * gw[u] * gw[v];
          mz[bin_index(ez, x[i] * rp[v] - x[j] * rm[u])] += w;
          ma[bin_index(ea, std::max(0.0, (static_cast<double>(i - j) + gu[u] + gu[v] - 0.5) * dt))] += w;
        }
    }
  MarginalSet out;
  out.size = st.size_marginal;
  out.increment = from_bins(ez, mz, false);
  out.age = from_bins(ea, ma, false);
  out.scale = {spread(out.size), spread(out.increment), spread(out.age)};
  return out;
}

std::array<double, 3> marginal_distances(const MarginalSet& data, const MarginalSet& model, const DistanceSpec& spec) {
  const std::array<const GridDensity*, 3> a = {&data.size, &data.increment, &data.age};
  const std::array<const GridDensity*, 3> b = {&model.size, &model.increment, &model.age};
  std::array<double, 3> d{};
  for (std::size_t c = 0; c < 3; ++c)
    d[c] = distance(standardized(*a[c], data.scale[c]), standardized(*b[c], data.scale[c]), spec);
  return d;
}

FragmentationKernel beta_septum_kernel(double cv, std::size_t n) {
  if (!(cv > 0.0) || cv >= 1.0) throw ValidationError("septum variability: cv must lie in (0, 1)");
  // Var = 1 / (4 (2a + 1)) for Beta(a, a), so cv = 1 / sqrt(2a + 1).
  const double a = 0.5 * (1.0 / (cv * cv) - 1.0);
  boost::math::beta_distribution<double> dist(a, a);
  auto g = num::linspace(0.0, 1.0, n);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = std::clamp(g[i], 1e-12, 1.0 - 1e-12);
    p[i] = boost::math::pdf(dist, z);
    if (!std::isfinite(p[i])) p[i] = 0.0;
  }
  return FragmentationKernel::density(g, p);
}

ModelSpec model_spec(const CalibratedModel& m, const Variability& v) {
  ModelSpec s;
  s.trigger = m.type == ModelType::timer ? Trigger::age : m.type == ModelType::sizer ? Trigger::size : Trigger::increment;
  s.rate = m.rate;
  s.growth = GrowthLaw::exponential(m.kappa);
  s.kernel = v.septum_cv > 0.0 ? beta_septum_kernel(v.septum_cv) : FragmentationKernel::mitosis();
  if (v.growth_cv > 0.0) s.variability = GrowthVariability{m.kappa, v.growth_cv};
  return s;
}

namespace {

std::uint64_t type_stream(ModelType t) { return 1000 + static_cast<std::uint64_t>(t); }

double median_birth_size(const SampleSet& data) {
  std::vector<double> b;
  for (const auto& r : data.records)
    if (r.size_birth > 0.0 && std::isfinite(r.size_birth)) b.push_back(r.size_birth);
  return b.empty() ? 1.0 : num::quantile(b, 0.5);
}

}  // namespace

SteadyState model_steady_state(const CalibratedModel& m, const SampleSet& data, const CompareOptions& opt) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& r : data.records) {
    if (r.size_birth > 0.0) lo = std::min(lo, r.size_birth);
    if (std::isfinite(r.size_division)) hi = std::max(hi, r.size_division);
    hi = std::max(hi, r.size_at_T);
  }
  if (!std::isfinite(lo) || !(hi > lo)) throw ValidationError("model steady state: data sizes do not span a range");
  SolverGrid grid = SolverGrid::geometric(lo / 4.0, 4.0 * hi, opt.points_per_octave);
  return simulate_to_steady(m.rate, m.type, m.kappa, m.k, grid, opt.max_steps, opt.steady_tol);
}

MarginalSet model_marginals(const CalibratedModel& m, const SampleSet& data, const MarginalSet& bins,
                            const CompareOptions& opt, SteadyState* steady) {
  if (!opt.variability.active()) {
    SteadyState st = model_steady_state(m, data, opt);
    MarginalSet out;
    if (st.stabilized) out = steady_marginals(st, m.kappa, bins);
    if (steady) *steady = std::move(st);
    return out;
  }
  ModelSpec spec = model_spec(m, opt.variability);
  RngStream rng(opt.seed, 2000 + type_stream(m.type));
  const double start = stationary_birth_size(spec, median_birth_size(data), rng);
  SteadyState st;
  st.type = m.type;
  st.stabilized = true;
  SampleSet sim;
  double lambda = 0.0;
  if (m.k == 1) {
    sim = simulate_tree(spec, SchemeRequest::U1(opt.n_monte_carlo), Root{start, 0.0}, rng);
  } else {
    lambda = m.fit.lambda > 0.0 ? m.fit.lambda : m.kappa;
    const double T = std::log(static_cast<double>(opt.n_monte_carlo)) / lambda;
    sim = simulate_population(spec, T, Root{start, 0.0}, rng, 4 * opt.n_monte_carlo).divided;
    st.lambda = lambda;
  }
  Edges E = edges_for(sim, opt.points_per_octave, 2);
  E.increment = edges_of(bins.increment);
  E.age = edges_of(bins.age);
  if (steady) *steady = std::move(st);
  return bin_marginals(sim, lambda, E);
}

// ---------------------------------------------------------------- ranking

ComparisonReport rank_models(const SampleSet& data, const std::vector<ModelType>& candidates,
                             const CompareOptions& opt) {
  if (candidates.empty()) throw ValidationError("rank_models: no candidate model");
  if (data.scheme == Scheme::VT)
    throw ValidationError("rank_models: snapshot data does not discriminate models; use U1 or U2 data");
  if (!data.has_sizes) throw ValidationError("rank_models: data lacks size_birth size_division");

  ComparisonReport rep;
  rep.scheme = data.scheme;
  rep.metric = opt.metric;
  rep.variability = opt.variability;
  CompareOptions o = opt;
  if (data.scheme == Scheme::U2) {
    rep.lambda = opt.calibration.lambda ? *opt.calibration.lambda
                                        : estimate_lambda(data, 0.5 * data.parameter, data.parameter).lambda;
    o.calibration.lambda = rep.lambda;
  }
  rep.data_row = correlation_table(data);
  rep.autocorrelation = lineage_autocorrelation(data);
  rep.data_stationary = !(rep.autocorrelation > opt.stationarity_threshold);
  if (rep.data_stationary) rep.data_marginals = data_marginals(data, rep.lambda, opt.points_per_octave);

  std::size_t n_chain = opt.n_model_chain;
  if (n_chain == 0) n_chain = std::max<std::size_t>(data.records.size(), 10000);
  const double start = median_birth_size(data);

  rep.models.resize(candidates.size());
  auto evaluate = [&](std::size_t c) {
    ModelReport& mr = rep.models[c];
    mr.model = calibrate(data, candidates[c], o.calibration);
    if (rep.data_stationary) {
      mr.marginals = model_marginals(mr.model, data, rep.data_marginals, o, &mr.steady);
      if (!mr.steady.stabilized) {
        mr.degenerate = true;
        mr.note = "no steady size profile (relative mass loss per unit time " + std::to_string(mr.steady.lost_fraction) +
                  ", last profile change " + std::to_string(mr.steady.step_change) + ")";
      } else {
        mr.marginal_distance = marginal_distances(rep.data_marginals, mr.marginals, o.metric);
        mr.distance = (mr.marginal_distance[0] + mr.marginal_distance[1] + mr.marginal_distance[2]) / 3.0;
      }
    } else {
      mr.note = "data sizes drift along lineages; size marginal not compared";
    }
    ModelSpec spec = model_spec(mr.model, o.variability);
    RngStream rng(o.seed, type_stream(candidates[c]));
    const double root = stationary_birth_size(spec, start, rng);
    SampleSet chain = simulate_tree(spec, SchemeRequest::U1(n_chain), Root{root, 0.0}, rng);
    mr.row = correlation_table(chain);
    mr.correlation_deviation = row_deviation(rep.data_row, mr.row);
  };

  parallel_for(candidates.size(), worker_count(opt.workers), evaluate);

  rep.ranking.resize(candidates.size());
  std::iota(rep.ranking.begin(), rep.ranking.end(), 0);
  auto dev = [&](std::size_t c) {
    double d = rep.models[c].correlation_deviation;
    return std::isfinite(d) ? d : std::numeric_limits<double>::infinity();
  };
  if (rep.data_stationary) {
    rep.ranking_basis = "marginals_" + metric_name(opt.metric.metric);
    std::stable_sort(rep.ranking.begin(), rep.ranking.end(), [&](std::size_t a, std::size_t b) {
      const auto& A = rep.models[a];
      const auto& B = rep.models[b];
      if (A.degenerate != B.degenerate) return B.degenerate;
      if (A.distance != B.distance) return A.distance < B.distance;
      return dev(a) < dev(b);
    });
  } else {
    rep.ranking_basis = "correlation_deviation";
    std::stable_sort(rep.ranking.begin(), rep.ranking.end(),
                     [&](std::size_t a, std::size_t b) { return dev(a) < dev(b); });
  }
  return rep;
}

}  // namespace divrate
