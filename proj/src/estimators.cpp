#include "divrate/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "divrate/deconvolution.hpp"
#include "divrate/numerics.hpp"
#include "divrate/simulate.hpp"
#include "divrate/smoothing.hpp"

namespace divrate {

namespace {

constexpr std::size_t kDefaultGrid = 512;

std::vector<double> default_grid(const std::vector<double>& sample, double lo) {
  double hi = *std::max_element(sample.begin(), sample.end());
  if (!(hi > lo)) hi = lo + 1.0;
  return num::linspace(lo, hi, kDefaultGrid);
}

std::vector<double> geometric_points(double lo, double hi, int m) {
  if (!(lo > 0.0) || !(hi > lo)) throw ValidationError("geometric grid: need 0 < lo < hi");
  std::vector<double> x;
  for (int i = 0;; ++i) {
    double v = lo * std::exp2(static_cast<double>(i) / m);
    x.push_back(v);
    if (v >= hi) break;
  }
  return x;
}

// Derivative on a possibly nonuniform grid (three-point interior formula, one-sided ends).
std::vector<double> grid_derivative(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<double> d(n, 0.0);
  if (n < 2) return d;
  if (n < 3) {
    d[0] = d[1] = (y[1] - y[0]) / (x[1] - x[0]);
    return d;
  }
  // Second-order one-sided stencils at the ends.
  auto one_sided = [](double h0, double h1, double y0, double y1, double y2) {
    return -(2.0 * h0 + h1) / (h0 * (h0 + h1)) * y0 + (h0 + h1) / (h0 * h1) * y1 - h0 / (h1 * (h0 + h1)) * y2;
  };
  d[0] = one_sided(x[1] - x[0], x[2] - x[1], y[0], y[1], y[2]);
  d[n - 1] = -one_sided(x[n - 1] - x[n - 2], x[n - 2] - x[n - 3], y[n - 1], y[n - 2], y[n - 3]);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    double h0 = x[i] - x[i - 1], h1 = x[i + 1] - x[i];
    d[i] = (-h1 / (h0 * (h0 + h1))) * y[i - 1] + ((h1 - h0) / (h0 * h1)) * y[i] + (h0 / (h1 * (h0 + h1))) * y[i + 1];
  }
  return d;
}

void require_sample(const std::vector<double>& s, std::size_t min_n, const char* what) {
  if (s.size() < min_n)
    throw ValidationError(std::string(what) + ": need at least " + std::to_string(min_n) + " observations");
  for (double v : s)
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite observation");
}

EstimationResult make_result(std::vector<double> grid, std::vector<double> values, std::vector<std::uint8_t> flags,
                             double h) {
  EstimationResult r;
  r.flags = std::move(flags);
  r.floor_hits = static_cast<std::size_t>(std::count(r.flags.begin(), r.flags.end(), 1));
  r.estimate = GridDensity(std::move(grid), std::move(values));
  r.estimate.normalization = 0.0;
  r.h = h;
  return r;
}

// Ratio of a smoothed density and a survival fraction, both from one weighted smoother.
EstimationResult smoothed_hazard(const KernelSmoother& sm, const std::vector<double>& grid, double floor) {
  std::vector<double> v(grid.size(), 0.0);
  std::vector<std::uint8_t> flags(grid.size(), 0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double s = sm.survival(grid[i]);
    if (s <= floor) {
      flags[i] = 1;
      continue;
    }
    double f = sm.density(grid[i]);
    if (f < 0.0) {
      flags[i] = 1;
      f = 0.0;
    }
    v[i] = f / s;
  }
  return make_result(grid, std::move(v), std::move(flags), sm.bandwidth());
}

}  // namespace

EstimationResult hazard_from_density(const GridDensity& f, double floor) {
  if (f.dim() != 1 || f.size() < 2) throw ValidationError("hazard transform: one-dimensional density required");
  std::vector<double> v = f.values;
  std::vector<std::uint8_t> flags(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] < 0.0) {
      v[i] = 0.0;
      flags[i] = 1;
    }
  std::vector<double> tail = num::tail_trapezoid(f.x, v);
  const double total = tail.front();
  if (!(total > 0.0)) throw NumericalError("hazard transform: density has no mass");
  std::vector<double> B(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (tail[i] <= floor * total) {
      flags[i] = 1;
      continue;
    }
    B[i] = v[i] / tail[i];
  }
  EstimationResult r = make_result(f.x, std::move(B), std::move(flags), 0.0);
  r.varpi = floor;
  return r;
}

// ---------------------------------------------------------------- age

EstimationResult estimate_B_age_genealogical(const std::vector<double>& lifetimes, const KernelSpec& K, double h,
                                             const std::vector<double>& grid, std::optional<double> lower_bound) {
  require_sample(lifetimes, 1, "age estimator");
  KernelSmoother sm(lifetimes, {}, K, h, lower_bound);
  std::vector<double> g = grid.empty() ? default_grid(lifetimes, lower_bound.value_or(0.0)) : grid;
  EstimationResult r = smoothed_hazard(sm, g, 0.0);
  r.effective_n = static_cast<double>(lifetimes.size());
  return r;
}

EstimationResult estimate_B_age_population(const std::vector<double>& lifetimes, double T, double lambda,
                                           const KernelSpec& K, double s, double h, const std::vector<double>& grid) {
  require_sample(lifetimes, 2, "population age estimator");
  if (!(lambda > 0.0)) throw ValidationError("population age estimator: lambda must be positive");
  if (!(h > 0.0)) h = std::exp(-lambda * T / (2.0 * s + 1.0));
  std::vector<double> w(lifetimes.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(lambda * lifetimes[i]);
  KernelSmoother sm(lifetimes, w, K, h, 0.0);
  std::vector<double> g = grid.empty() ? default_grid(lifetimes, 0.0) : grid;
  const double floor = 1.0 / static_cast<double>(lifetimes.size());
  EstimationResult r = smoothed_hazard(sm, g, floor);
  if (r.floor_hits == g.size()) throw NumericalError("population age estimator: denominator below the floor everywhere");
  r.varpi = floor;
  r.lambda = lambda;
  double sw = std::accumulate(w.begin(), w.end(), 0.0), sw2 = 0.0;
  for (double x : w) sw2 += x * x;
  r.effective_n = sw * sw / sw2;
  r.diagnostics["T"] = T;
  return r;
}

RateFunction compute_biased_hazard(const GridDensity& f2, double floor) {
  if (f2.dim() != 1 || f2.size() < 2) throw ValidationError("biased hazard: one-dimensional density required");
  std::vector<double> v(f2.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, f2.values[i]);
  std::vector<double> cum = num::cumulative_trapezoid(f2.x, v);
  const double total = cum.back();
  if (!(total > 0.0)) throw NumericalError("biased hazard: density has no mass");
  std::vector<double> x, H;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double s = 1.0 - cum[i] / total;
    if (s <= floor) break;
    x.push_back(f2.x[i]);
    H.push_back(v[i] / total / s);
  }
  while (!H.empty() && !(H.back() > 0.0)) {
    H.pop_back();
    x.pop_back();
  }
  if (H.empty()) throw NumericalError("biased hazard: no point above the floor");
  return RateFunction(x, H);
}

LambdaEstimate estimate_lambda(const std::vector<std::pair<double, double>>& counts) {
  if (counts.size() < 3) throw ValidationError("estimate_lambda: need at least three time points");
  // Weighted least squares: ln N(t) of a branching population has variance of order 1/N(t).
  double sw = 0.0, st = 0.0, sy = 0.0;
  for (const auto& [ti, ci] : counts) {
    if (!(ci > 0.0) || !std::isfinite(ti)) throw ValidationError("estimate_lambda: counts must be positive");
    sw += ci;
    st += ci * ti;
    sy += ci * std::log(ci);
  }
  const double mt = st / sw, my = sy / sw;
  double sxy = 0.0, sxx = 0.0, ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (const auto& [ti, ci] : counts) {
    const double y = std::log(ci);
    sxy += ci * (ti - mt) * (y - my);
    sxx += ci * (ti - mt) * (ti - mt);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (!(sxx > 0.0)) throw ValidationError("estimate_lambda: time points must be distinct");
  if (ymax - ymin < std::log(2.0) * (1.0 - 1e-12))
    throw ValidationError("estimate_lambda: series must span at least one doubling");
  LambdaEstimate e;
  e.lambda = sxy / sxx;
  if (!(e.lambda > 0.0)) throw ValidationError("estimate_lambda: series is not growing");
  e.intercept = my - e.lambda * mt;
  e.doubling_time = std::log(2.0) / e.lambda;
  e.points = counts.size();
  return e;
}

LambdaEstimate estimate_lambda(const SampleSet& u2, double t0, double t1, std::size_t n_times) {
  if (!(t1 > t0) || n_times < 3) throw ValidationError("estimate_lambda: need t1 > t0 and at least three times");
  return estimate_lambda(population_counts(u2, num::linspace(t0, t1, n_times)));
}

namespace {

EstimationResult inverse_age(const std::vector<double>& grid, const std::vector<double>& N,
                             const std::vector<double>& dN, double lambda, double varpi, double h) {
  const double nmax = *std::max_element(N.begin(), N.end());
  std::vector<double> v(grid.size(), 0.0);
  std::vector<std::uint8_t> flags(grid.size(), 0);
  std::size_t below = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(N[i] > varpi * nmax)) {
      flags[i] = 1;
      ++below;
      continue;
    }
    double b = -lambda - dN[i] / N[i];
    if (b < 0.0) {
      b = 0.0;
      flags[i] = 1;
    }
    v[i] = b;
  }
  if (below == grid.size()) throw NumericalError("point-data age estimator: floor hit everywhere");
  EstimationResult r = make_result(grid, std::move(v), std::move(flags), h);
  r.varpi = varpi;
  r.lambda = lambda;
  return r;
}

}  // namespace

EstimationResult estimate_B_age_pointdata(const std::vector<double>& ages, double lambda, const KernelSpec& K,
                                          double h, double varpi, const std::vector<double>& grid) {
  require_sample(ages, 2, "point-data age estimator");
  KernelSmoother sm(ages, {}, K, h, 0.0);
  std::vector<double> g = grid.empty() ? default_grid(ages, 0.0) : grid;
  if (!(varpi > 0.0)) varpi = 1.0 / static_cast<double>(ages.size());
  EstimationResult r = inverse_age(g, sm.density(g), sm.derivative(g), lambda, varpi, h);
  r.effective_n = static_cast<double>(ages.size());
  return r;
}

EstimationResult estimate_B_age_pointdata(const GridDensity& N, double lambda, const KernelSpec& K, double h,
                                          double varpi) {
  if (N.dim() != 1 || N.size() < 3) throw ValidationError("point-data age estimator: one-dimensional grid required");
  GridDensity s = h > 0.0 ? regularize_noisy_density(N, K, h) : N;
  return inverse_age(s.x, s.values, grid_derivative(s.x, s.values), lambda, varpi, h);
}

// ---------------------------------------------------------------- size

EstimationResult estimate_B_size_dynamics(const GridDensity& f_div, const GridDensity& f_birth, int k, double lambda,
                                          const GrowthLaw& tau, double varpi) {
  if (k != 1 && k != 2) throw ValidationError("size dynamics estimator: k must be 1 or 2");
  if (f_div.dim() != 1 || f_div.size() < 2) throw ValidationError("size dynamics estimator: 1D densities required");
  const std::vector<double>& x = f_div.x;
  const std::size_t n = x.size();
  const double lam = k == 2 ? lambda : 0.0;
  if (k == 2 && !(lambda > 0.0)) throw ValidationError("size dynamics estimator: k = 2 needs lambda > 0");
  std::vector<double> fd(n), g(n);
  for (std::size_t i = 0; i < n; ++i) {
    fd[i] = std::max(0.0, f_div.values[i]);
    g[i] = fd[i] - k * std::max(0.0, f_birth.at(x[i]));
  }
  // D(x) = int_x^inf g(y) e^{lam Theta(x, y)} dy, accumulated downward.
  std::vector<double> D(n, 0.0);
  for (std::size_t i = n - 1; i-- > 0;) {
    double e = std::exp(lam * tau.flow_time(x[i], x[i + 1]));
    D[i] = e * D[i + 1] + 0.5 * (x[i + 1] - x[i]) * (g[i] + g[i + 1] * e);
  }
  double dmax = 0.0;
  for (double d : D) dmax = std::max(dmax, d);
  std::vector<double> v(n, 0.0);
  std::vector<std::uint8_t> flags(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(D[i] > varpi * dmax)) {
      flags[i] = 1;
      continue;
    }
    v[i] = fd[i] / D[i];
  }
  EstimationResult r = make_result(x, std::move(v), std::move(flags), 0.0);
  r.varpi = varpi;
  r.lambda = lam;
  return r;
}

EstimationResult estimate_B_size_dynamics(const std::vector<double>& division_sizes,
                                          const std::vector<double>& birth_sizes, int k, double lambda,
                                          const GrowthLaw& tau, const KernelSpec& K, double h,
                                          const std::vector<double>& grid) {
  require_sample(division_sizes, 2, "size dynamics estimator");
  require_sample(birth_sizes, 2, "size dynamics estimator");
  std::vector<double> g = grid;
  if (g.empty()) {
    double hi = *std::max_element(division_sizes.begin(), division_sizes.end()) + h;
    g = num::linspace(0.0, hi, kDefaultGrid);
  }
  GridDensity fd = regularize_noisy_density(division_sizes, K, h, g);
  GridDensity fb = regularize_noisy_density(birth_sizes, K, h, g);
  EstimationResult r = estimate_B_size_dynamics(fd, fb, k, lambda, tau, 1.0 / static_cast<double>(division_sizes.size()));
  r.h = h;
  r.effective_n = static_cast<double>(division_sizes.size());
  return r;
}

EstimationResult estimate_B_size_genealogical(const std::vector<double>& parent, const std::vector<double>& child,
                                              const KernelSpec& K, double h, double varpi,
                                              const std::vector<double>& grid) {
  require_sample(child, 2, "size genealogical estimator");
  if (parent.size() != child.size()) throw ValidationError("size genealogical estimator: pair lengths differ");
  const std::size_t n = child.size();
  if (!(varpi > 0.0)) varpi = 1.0 / static_cast<double>(n);
  KernelSmoother nu(child, {}, K, h);
  std::vector<double> g = grid;
  if (g.empty()) g = num::linspace(0.0, 2.0 * *std::max_element(child.begin(), child.end()), kDefaultGrid);
  std::vector<double> v(g.size(), 0.0);
  std::vector<std::uint8_t> flags(g.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double y = g[i];
    std::size_t cnt = 0;
    for (std::size_t j = 0; j < n; ++j) cnt += (parent[j] <= y && child[j] >= 0.5 * y);
    double p = static_cast<double>(cnt) / static_cast<double>(n);
    if (p < varpi) {
      flags[i] = 1;
      p = varpi;
    }
    v[i] = std::max(0.0, 0.5 * nu.density(0.5 * y) / p);
  }
  EstimationResult r = make_result(g, std::move(v), std::move(flags), h);
  r.varpi = varpi;
  r.effective_n = static_cast<double>(n);
  return r;
}

EstimationResult estimate_B_size_genealogical(const SampleSet& chain, const KernelSpec& K, double h, double varpi,
                                              const std::vector<double>& grid) {
  if (!chain.has_sizes) throw ValidationError("size genealogical estimator: sample has no size columns");
  std::vector<double> parent, child;
  for (std::size_t i = 1; i < chain.records.size(); ++i) {
    parent.push_back(chain.records[i - 1].size_birth);
    child.push_back(chain.records[i].size_birth);
  }
  return estimate_B_size_genealogical(parent, child, K, h, varpi, grid);
}

namespace {

// Gluing point for smoothed samples: the variance of L-hat scales like tau^2 N (up to a factor common to both
// branches), propagated through each series with weights (2k)^{-2j} below and (2k)^{2j} above. Returns the split
// minimizing the summed variance of the glued estimate.
double noise_gluing_point(const std::vector<double>& x, const std::vector<double>& N, const SizePointOptions& opt) {
  const std::size_t n = x.size();
  const int m = octave_points(x);
  const double q = 4.0 * opt.k * opt.k;
  std::vector<double> v(n), v0(n, 0.0), vinf(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double t = opt.tau.tau(x[i]);
    v[i] = t * t * std::max(N[i], 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double w = 1.0;
    for (std::size_t j = i; j >= static_cast<std::size_t>(m); j -= static_cast<std::size_t>(m)) {
      w /= q;
      v0[i] += w * v[j - static_cast<std::size_t>(m)];
    }
    w = 1.0;
    for (std::size_t j = i; j < n; j += static_cast<std::size_t>(m)) {
      vinf[i] += w * v[j];
      w *= q;
    }
  }
  double below = 0.0, above = std::accumulate(vinf.begin(), vinf.end(), 0.0);
  double best = above;
  std::size_t split = 0;
  for (std::size_t i = 0; i < n; ++i) {
    below += v0[i];
    above -= vinf[i];
    if (below + above < best) {
      best = below + above;
      split = i + 1;
    }
  }
  return x[std::min(split, n - 1)];
}

EstimationResult size_inverse(const std::vector<double>& x, const std::vector<double>& N, const std::vector<double>& dN,
                              SizePointOptions opt, double h) {
  const std::size_t n = x.size();
  std::vector<double> tN(n), L(n);
  for (std::size_t i = 0; i < n; ++i) {
    double t = opt.tau.tau(x[i]);
    double dx = 1e-6 * x[i];
    double dt = (opt.tau.tau(x[i] + dx) - opt.tau.tau(x[i] - dx)) / (2.0 * dx);
    tN[i] = t * N[i];
    L[i] = dt * N[i] + t * dN[i] + opt.lambda * N[i];
  }
  GridDensity Lg(x, L, true);
  GridDensity H;
  double discrepancy = 0.0;
  std::size_t flagged = 0;
  if (opt.b0.is_mitosis()) {
    DilationReport rep;
    H = dilation_solve({Lg, opt.k, DilationBranch::glued, opt.x_bar}, &rep);
    discrepancy = rep.branch_discrepancy;
  } else {
    H = mellin_dilation_solve(Lg, opt.b0, opt.k, opt.mellin_q, {}, &flagged);
  }
  const double tmax = *std::max_element(tN.begin(), tN.end());
  std::vector<double> v(n, 0.0);
  std::vector<std::uint8_t> flags(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(tN[i] > opt.varpi * tmax)) {
      flags[i] = 1;
      continue;
    }
    double b = H.values[i] / tN[i];
    if (b < 0.0) {
      b = 0.0;
      flags[i] = 1;
    }
    v[i] = b;
  }
  EstimationResult r = make_result(x, std::move(v), std::move(flags), h);
  r.estimate.geometric = true;
  r.varpi = opt.varpi;
  r.lambda = opt.lambda;
  r.diagnostics["branch_discrepancy"] = discrepancy;
  r.diagnostics["flagged_frequencies"] = static_cast<double>(flagged);
  return r;
}

}  // namespace

EstimationResult estimate_B_size_pointdata(const std::vector<double>& sizes, const SizePointOptions& opt,
                                           const KernelSpec& K, double h) {
  require_sample(sizes, 2, "size point-data estimator");
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  if (!(*lo > 0.0)) throw ValidationError("size point-data estimator: sizes must be positive");
  std::vector<double> x = geometric_points(std::max(0.25 * *lo, 1e-12), 2.0 * *hi + h, opt.points_per_octave);
  KernelSmoother sm(sizes, {}, K, h, 0.0);
  std::vector<double> N = sm.density(x);
  SizePointOptions o = opt;
  if (!(o.x_bar > 0.0) && o.b0.is_mitosis()) o.x_bar = noise_gluing_point(x, N, o);
  EstimationResult r = size_inverse(x, N, sm.derivative(x), o, h);
  r.diagnostics["x_bar"] = o.x_bar;
  r.effective_n = static_cast<double>(sizes.size());
  return r;
}

EstimationResult estimate_B_size_pointdata(const GridDensity& N, const SizePointOptions& opt) {
  if (N.dim() != 1) throw ValidationError("size point-data estimator: one-dimensional density required");
  octave_points(N.x);
  return size_inverse(N.x, N.values, grid_derivative(N.x, N.values), opt, 0.0);
}

// ---------------------------------------------------------------- increment

EstimationResult estimate_B_increment_genealogical(const std::vector<double>& increments, const KernelSpec& K,
                                                   double h, const std::vector<double>& birth_sizes,
                                                   const std::vector<double>& grid) {
  EstimationResult r = estimate_B_age_genealogical(increments, K, h, grid);
  if (!birth_sizes.empty()) {
    if (birth_sizes.size() != increments.size())
      throw ValidationError("increment estimator: birth sizes and increments differ in length");
    r.diagnostics["corr_birth_increment"] = num::pearson(birth_sizes, increments);
  }
  return r;
}

EstimationResult estimate_B_increment_population(const std::vector<double>& increments,
                                                 const std::vector<double>& division_sizes, const KernelSpec& K,
                                                 double h, const std::vector<double>& grid) {
  require_sample(increments, 2, "population increment estimator");
  if (division_sizes.size() != increments.size())
    throw ValidationError("population increment estimator: increments and sizes differ in length");
  for (double x : division_sizes)
    if (!(x > 0.0)) throw ValidationError("population increment estimator: sizes must be positive");
  KernelSmoother sm(increments, division_sizes, K, h, 0.0);
  std::vector<double> g = grid.empty() ? default_grid(increments, 0.0) : grid;
  EstimationResult r = smoothed_hazard(sm, g, 0.0);
  double sw = std::accumulate(division_sizes.begin(), division_sizes.end(), 0.0), sw2 = 0.0;
  for (double x : division_sizes) sw2 += x * x;
  r.effective_n = sw * sw / sw2;
  return r;
}

namespace {

std::vector<double> solve_h1(const std::vector<double>& x, const std::vector<double>& N, const std::vector<double>& dN,
                             double kappa, int k, double* discrepancy) {
  std::vector<double> L(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double xk = std::pow(x[i], k);
    L[i] = kappa * (k * xk / x[i] * N[i] + xk * dN[i]);
  }
  DilationReport rep;
  GridDensity H = dilation_solve({GridDensity(x, L, true), 1, DilationBranch::glued, 0.0}, &rep);
  if (discrepancy) *discrepancy = rep.branch_discrepancy;
  return H.values;
}

struct UniformPair {
  std::vector<double> num, den;
  double dx = 0.0;
};

// H1 and 2 H1(2.) on the uniform grid [0, 2 x_max).
UniformPair to_uniform(const std::vector<double>& x, const std::vector<double>& H1, std::size_t n) {
  UniformPair u;
  u.dx = 2.0 * x.back() / static_cast<double>(n);
  u.num.resize(n);
  u.den.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    double t = static_cast<double>(j) * u.dx;
    u.num[j] = num::interp(x, H1, t, 0.0);
    u.den[j] = 2.0 * num::interp(x, H1, 2.0 * t, 0.0);
  }
  return u;
}

num::cvec spectrum(const std::vector<double>& v) { return num::fft(num::cvec(v.begin(), v.end())); }

// First frequency where the denominator modulus falls below 10x the noise floor.
double noise_cutoff(const num::cvec& D, const std::vector<double>& noise, double dx) {
  const std::size_t n = D.size();
  for (std::size_t j = 1; j <= n / 2; ++j)
    if (std::abs(D[j]) < 10.0 * noise[j]) return num::fft_frequency(j, n, dx);
  return num::fft_frequency(n / 2, n, dx);
}

// Flat floor: median modulus over the upper half of the spectrum.
std::vector<double> flat_noise(const num::cvec& D) {
  const std::size_t n = D.size();
  std::vector<double> upper;
  for (std::size_t j = n / 4; j <= n / 2; ++j) upper.push_back(std::abs(D[j]));
  return std::vector<double>(n, num::quantile(upper, 0.5));
}

// Half-sample floor: |D_a - D_b| / 2 has the spread of the full-sample transform; running median over 17 bins.
std::vector<double> split_noise(const num::cvec& Da, const num::cvec& Db) {
  const std::size_t n = Da.size();
  std::vector<double> raw(n), out(n);
  for (std::size_t j = 0; j < n; ++j) raw[j] = 0.5 * std::abs(Da[j] - Db[j]);
  const std::size_t w = 8;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t lo = j >= w ? j - w : 0, hi = std::min(n, j + w + 1);
    out[j] = num::quantile(std::vector<double>(raw.begin() + static_cast<long>(lo), raw.begin() + static_cast<long>(hi)), 0.5);
  }
  return out;
}

EstimationResult deconvolve_h1(const std::vector<double>& x, const UniformPair& u, double cutoff,
                               const MarginalDeconvolutionOptions& opt, double h, double discrepancy) {
  const std::size_t n = u.num.size();
  const double dx = u.dx, xmax = x.back();
  FourierDeconvolution fd = fourier_deconvolve(u.num, u.den, dx, cutoff, opt.floor);
  const double zmax = opt.z_max > 0.0 ? opt.z_max : xmax;
  std::vector<double> z, f;
  std::size_t clipped = 0;
  for (std::size_t j = 0; j < n / 2; ++j) {
    double t = static_cast<double>(j) * dx;
    if (t > zmax) break;
    z.push_back(t);
    double v = fd.values[j];
    if (v < 0.0) {
      v = 0.0;
      ++clipped;
    }
    f.push_back(v);
  }
  GridDensity fz(z, f);
  fz.normalize();
  EstimationResult r = hazard_from_density(fz, 1e-6);
  r.h = h;
  r.h2 = 1.0 / cutoff;
  r.diagnostics["cutoff"] = cutoff;
  r.diagnostics["clipped"] = static_cast<double>(clipped);
  r.diagnostics["imag_residual"] = fd.imag_residual;
  r.diagnostics["floor_hits"] = static_cast<double>(fd.floor_hits);
  r.diagnostics["branch_discrepancy"] = discrepancy;
  return r;
}

}  // namespace

GridDensity dilation_source(const GridDensity& Nx, double kappa, int k) {
  if (Nx.dim() != 1) throw ValidationError("dilation source: one-dimensional density required");
  octave_points(Nx.x);
  std::vector<double> H = solve_h1(Nx.x, Nx.values, grid_derivative(Nx.x, Nx.values), kappa, k, nullptr);
  GridDensity g(Nx.x, std::move(H), true);
  g.refresh_normalization();
  return g;
}

EstimationResult estimate_B_increment_from_size_marginal(const std::vector<double>& sizes, const KernelSpec& K,
                                                         double h, const MarginalDeconvolutionOptions& opt) {
  require_sample(sizes, 4, "size-marginal increment estimator");
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  if (!(*lo > 0.0)) throw ValidationError("size-marginal increment estimator: sizes must be positive");
  std::vector<double> x = geometric_points(std::max(0.25 * *lo, 1e-12), 2.0 * (*hi + h), opt.points_per_octave);
  auto h1_of = [&](const std::vector<double>& s, double* disc) {
    KernelSmoother sm(s, {}, K, h, 0.0);
    return solve_h1(x, sm.density(x), sm.derivative(x), opt.kappa, opt.k, disc);
  };
  double disc = 0.0;
  UniformPair u = to_uniform(x, h1_of(sizes, &disc), opt.n_uniform);
  double cutoff = opt.cutoff;
  if (!(cutoff > 0.0)) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < sizes.size(); ++i) (i % 2 == 0 ? a : b).push_back(sizes[i]);
    num::cvec Da = spectrum(to_uniform(x, h1_of(a, nullptr), opt.n_uniform).den);
    num::cvec Db = spectrum(to_uniform(x, h1_of(b, nullptr), opt.n_uniform).den);
    cutoff = noise_cutoff(spectrum(u.den), split_noise(Da, Db), u.dx);
  }
  EstimationResult r = deconvolve_h1(x, u, cutoff, opt, h, disc);
  r.effective_n = static_cast<double>(sizes.size());
  return r;
}

EstimationResult estimate_B_increment_from_size_marginal(const GridDensity& Nx,
                                                         const MarginalDeconvolutionOptions& opt) {
  if (Nx.dim() != 1) throw ValidationError("size-marginal increment estimator: 1D marginal required");
  octave_points(Nx.x);
  double disc = 0.0;
  std::vector<double> H1 = solve_h1(Nx.x, Nx.values, grid_derivative(Nx.x, Nx.values), opt.kappa, opt.k, &disc);
  UniformPair u = to_uniform(Nx.x, H1, opt.n_uniform);
  double cutoff = opt.cutoff;
  if (!(cutoff > 0.0)) {
    num::cvec D = spectrum(u.den);
    cutoff = noise_cutoff(D, flat_noise(D), u.dx);
  }
  return deconvolve_h1(Nx.x, u, cutoff, opt, 0.0, disc);
}

// ---------------------------------------------------------------- smoothing and bandwidths

GridDensity regularize_noisy_density(const GridDensity& f, const KernelSpec& K, double h) {
  if (f.dim() != 1 || f.size() < 2) throw ValidationError("regularize: one-dimensional grid required");
  if (!(h > 0.0)) throw ValidationError("regularize: bandwidth must be positive");
  const std::vector<double>& x = f.x;
  const std::size_t n = x.size();
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double l = i > 0 ? x[i] - x[i - 1] : 0.0, r = i + 1 < n ? x[i + 1] - x[i] : 0.0;
    w[i] = 0.5 * (l + r);
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double mass = f.values[j] * w[j];
    if (mass == 0.0) continue;
    auto lo = static_cast<std::size_t>(std::lower_bound(x.begin(), x.end(), x[j] - h) - x.begin());
    auto hi = static_cast<std::size_t>(std::upper_bound(x.begin(), x.end(), x[j] + h) - x.begin());
    double col = 0.0;
    for (std::size_t i = lo; i < hi; ++i) col += K.kh(x[i] - x[j], h) * w[i];
    if (!(col > 0.0)) {
      out[j] += mass / w[j];
      continue;
    }
    for (std::size_t i = lo; i < hi; ++i) out[i] += mass * K.kh(x[i] - x[j], h) / col;
  }
  GridDensity g(x, std::move(out), f.geometric);
  g.refresh_normalization();
  return g;
}

GridDensity regularize_noisy_density(const std::vector<double>& sample, const KernelSpec& K, double h,
                                     const std::vector<double>& grid) {
  require_sample(sample, 1, "regularize");
  KernelSmoother sm(sample, {}, K, h);
  GridDensity g(grid, sm.density(grid));
  g.refresh_normalization();
  return g;
}

namespace {

std::vector<double> dyadic_candidates(double h0) {
  std::vector<double> hs;
  for (int j = -4; j <= 3; ++j) hs.push_back(h0 * std::exp2(static_cast<double>(j)));
  return hs;
}

double squared_l2(const std::vector<double>& x, const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = (a[i] - b[i]) * (a[i] - b[i]);
  return num::trapezoid(x, d);
}

}  // namespace

double select_bandwidth(const std::vector<double>& sample, const KernelSpec& K, BandwidthMethod method,
                        std::optional<double> lower_bound, int folds) {
  const double h0 = rule_of_thumb_bandwidth(sample, K.order());
  if (method == BandwidthMethod::rule_of_thumb) return h0;
  if (sample.size() < 50) throw ValidationError("select_bandwidth: data-driven methods need n >= 50");
  const std::vector<double> hs = dyadic_candidates(h0);
  const auto [mn, mx] = std::minmax_element(sample.begin(), sample.end());
  const double lo = lower_bound ? std::max(*lower_bound, *mn - hs.back()) : *mn - hs.back();
  const std::vector<double> grid = num::linspace(lo, *mx + hs.back(), 1024);
  const double n = static_cast<double>(sample.size());

  if (method == BandwidthMethod::cross_validation) {
    if (folds < 2) throw ValidationError("select_bandwidth: need at least two folds");
    double best_h = h0, best = std::numeric_limits<double>::infinity();
    for (double h : hs) {
      double score = 0.0;
      for (int v = 0; v < folds; ++v) {
        std::vector<double> train, test;
        for (std::size_t i = 0; i < sample.size(); ++i)
          (static_cast<int>(i % static_cast<std::size_t>(folds)) == v ? test : train).push_back(sample[i]);
        KernelSmoother sm(train, {}, K, h, lower_bound);
        std::vector<double> f = sm.density(grid);
        for (double& y : f) y *= y;
        double cross = 0.0;
        for (double t : test) cross += sm.density(t);
        score += num::trapezoid(grid, f) - 2.0 * cross / static_cast<double>(test.size());
      }
      if (score < best) {
        best = score;
        best_h = h;
      }
    }
    return best_h;
  }

  // Comparison of estimates: A(h) = max over smaller h' of (||f_h - f_h'||^2 - V(h'))_+, minimize A + V.
  std::vector<std::vector<double>> est;
  for (double h : hs) est.push_back(KernelSmoother(sample, {}, K, h, lower_bound).density(grid));
  auto V = [&](double h) { return 2.0 * K.roughness() / (n * h); };
  double best_h = h0, best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < hs.size(); ++a) {
    double A = 0.0;
    for (std::size_t b = 0; b < a; ++b) A = std::max(A, squared_l2(grid, est[a], est[b]) - V(hs[b]));
    double crit = A + V(hs[a]);
    if (crit < best) {
      best = crit;
      best_h = hs[a];
    }
  }
  return best_h;
}

}  // namespace divrate
