#include "divrate/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "divrate/numerics.hpp"

namespace divrate {

// ---------------------------------------------------------------- RateFunction

RateFunction::RateFunction(std::vector<double> grid, std::vector<double> values, TailPolicy tail,
                           double tail_exponent)
    : form_(Form::tabulated), grid_(std::move(grid)), values_(std::move(values)), tail_(tail),
      tail_exponent_(tail_exponent) {
  if (grid_.empty() || grid_.size() != values_.size())
    throw ValidationError("rate table: grid and values must be nonempty and of equal length");
  if (grid_.front() < 0.0) throw ValidationError("rate table: abscissae must be nonnegative");
  for (std::size_t i = 1; i < grid_.size(); ++i)
    if (!(grid_[i] > grid_[i - 1])) throw ValidationError("rate table: grid must be strictly increasing");
  for (double v : values_)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("rate table: values must be finite and nonnegative");
  if (!(values_.back() > 0.0))
    throw ValidationError("rate table: last value must be positive so that the cumulative hazard diverges");
  if (tail_ == TailPolicy::power_law) {
    if (tail_exponent_ < 0.0) throw ValidationError("rate table: power-law tail exponent must be >= 0");
    if (grid_.back() <= 0.0) throw ValidationError("rate table: power-law tail needs a positive last abscissa");
  }
  cum_.assign(grid_.size(), 0.0);
  for (std::size_t i = 1; i < grid_.size(); ++i)
    cum_[i] = cum_[i - 1] + 0.5 * (grid_[i] - grid_[i - 1]) * (values_[i] + values_[i - 1]);
}

RateFunction RateFunction::constant(double b) {
  if (!(b > 0.0) || !std::isfinite(b)) throw ValidationError("constant rate must be positive");
  RateFunction r(std::vector<double>{0.0}, std::vector<double>{b});
  r.form_ = Form::constant;
  r.c_ = b;
  return r;
}

RateFunction RateFunction::power(double c, double gamma) {
  if (!(c > 0.0)) throw ValidationError("power rate: coefficient must be positive");
  if (!(gamma > -1.0)) throw ValidationError("power rate: exponent must exceed -1 for a finite hazard");
  RateFunction r(std::vector<double>{0.0}, std::vector<double>{1.0});
  r.form_ = Form::power;
  r.c_ = c;
  r.gamma_ = gamma;
  return r;
}

RateFunction RateFunction::step(double c, double a0) {
  if (!(c > 0.0) || a0 < 0.0) throw ValidationError("step rate: need c > 0 and a0 >= 0");
  RateFunction r(std::vector<double>{0.0}, std::vector<double>{1.0});
  r.form_ = Form::step;
  r.c_ = c;
  r.a0_ = a0;
  return r;
}

double RateFunction::operator()(double x) const {
  if (x < 0.0) x = 0.0;
  switch (form_) {
    case Form::constant:
      return c_;
    case Form::power:
      if (x == 0.0) return gamma_ == 0.0 ? c_ : (gamma_ > 0 ? 0.0 : std::numeric_limits<double>::infinity());
      return c_ * std::pow(x, gamma_);
    case Form::step:
      return x >= a0_ ? c_ : 0.0;
    case Form::tabulated:
      break;
  }
  if (x < grid_.front()) return tail_ == TailPolicy::zero_before_support ? 0.0 : values_.front();
  if (x > grid_.back()) {
    if (tail_ == TailPolicy::power_law) return values_.back() * std::pow(x / grid_.back(), tail_exponent_);
    return values_.back();
  }
  return num::interp(grid_, values_, x);
}

double RateFunction::cum_from0(double x) const {
  if (x <= 0.0) return 0.0;
  switch (form_) {
    case Form::constant:
      return c_ * x;
    case Form::power:
      return c_ * std::pow(x, gamma_ + 1.0) / (gamma_ + 1.0);
    case Form::step:
      return c_ * std::max(0.0, x - a0_);
    case Form::tabulated:
      break;
  }
  const double left = tail_ == TailPolicy::zero_before_support ? 0.0 : values_.front();
  if (x <= grid_.front()) return left * x;
  double h0 = left * grid_.front();
  if (x >= grid_.back()) {
    double r = x - grid_.back();
    double base = h0 + cum_.back();
    if (tail_ == TailPolicy::power_law) {
      double g = tail_exponent_ + 1.0, xn = grid_.back();
      return base + values_.back() * xn / g * (std::pow(x / xn, g) - 1.0);
    }
    return base + values_.back() * r;
  }
  std::size_t i = static_cast<std::size_t>(std::upper_bound(grid_.begin(), grid_.end(), x) - grid_.begin()) - 1;
  double d = x - grid_[i];
  double s = (values_[i + 1] - values_[i]) / (grid_[i + 1] - grid_[i]);
  return h0 + cum_[i] + values_[i] * d + 0.5 * s * d * d;
}

double RateFunction::inv_from0(double h) const {
  if (h <= 0.0) return 0.0;
  switch (form_) {
    case Form::constant:
      return h / c_;
    case Form::power:
      return std::pow((gamma_ + 1.0) * h / c_, 1.0 / (gamma_ + 1.0));
    case Form::step:
      return a0_ + h / c_;
    case Form::tabulated:
      break;
  }
  const double left = tail_ == TailPolicy::zero_before_support ? 0.0 : values_.front();
  double h0 = left * grid_.front();
  if (h <= h0) return h / left;
  double r = h - h0;
  if (r >= cum_.back()) {
    double rr = r - cum_.back();
    double xn = grid_.back(), vn = values_.back();
    if (tail_ == TailPolicy::power_law) {
      double g = tail_exponent_ + 1.0;
      return xn * std::pow(1.0 + g * rr / (vn * xn), 1.0 / g);
    }
    return xn + rr / vn;
  }
  std::size_t i = static_cast<std::size_t>(std::upper_bound(cum_.begin(), cum_.end(), r) - cum_.begin()) - 1;
  if (i + 1 >= grid_.size()) i = grid_.size() - 2;
  double rem = r - cum_[i];
  double v = values_[i];
  double s = (values_[i + 1] - values_[i]) / (grid_[i + 1] - grid_[i]);
  double disc = v * v + 2.0 * s * rem;
  if (disc < 0.0) disc = 0.0;
  double denom = v + std::sqrt(disc);
  double d = denom > 0.0 ? 2.0 * rem / denom : 0.0;
  return std::min(grid_[i] + d, grid_[i + 1]);
}

double RateFunction::cumulative(double x) const { return cum_from0(x); }

double RateFunction::cumulative(double x0, double x1) const {
  if (x1 < x0) throw ValidationError("cumulative hazard: need x0 <= x1");
  if (x1 == x0) return 0.0;
  double v = cum_from0(x1) - cum_from0(x0);
  if (!std::isfinite(v)) throw NumericalError("cumulative hazard: divergent integral on a finite interval");
  return std::max(0.0, v);
}

double RateFunction::inverse_cumulative(double x0, double e) const {
  if (e < 0.0) throw ValidationError("inverse cumulative hazard: negative target");
  if (e == 0.0) return x0;
  double target = cum_from0(x0) + e;
  double x = inv_from0(target);
  if (!std::isfinite(x)) throw NumericalError("inverse cumulative hazard: root not bracketed");
  return std::max(x, x0);
}

RateFunction RateFunction::tabulate(const std::vector<double>& grid) const {
  std::vector<double> v(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v[i] = (*this)(grid[i]);
  if (!std::isfinite(v.front())) v.front() = v.size() > 1 ? v[1] : 1.0;
  if (form_ == Form::power) return RateFunction(grid, v, TailPolicy::power_law, std::max(0.0, gamma_));
  return RateFunction(grid, v, TailPolicy::constant_last);
}

double eval_rate(const RateFunction& B, double x) { return B(x); }

double cumulative_hazard(const RateFunction& B, double x0, double x1) {
  if (x0 < 0.0) throw ValidationError("cumulative hazard: x0 must be nonnegative");
  return B.cumulative(x0, x1);
}

// ---------------------------------------------------------------- GrowthLaw

GrowthLaw GrowthLaw::exponential(double kappa) {
  if (!(kappa > 0.0)) throw ValidationError("growth rate kappa must be positive");
  GrowthLaw g;
  g.exponential_ = true;
  g.kappa_ = kappa;
  return g;
}

GrowthLaw GrowthLaw::tabulated(std::vector<double> grid, std::vector<double> tau) {
  if (grid.size() < 2 || grid.size() != tau.size()) throw ValidationError("growth table: need >= 2 points");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw ValidationError("growth table: grid must be strictly increasing");
  for (double t : tau)
    if (!(t > 0.0)) throw ValidationError("growth table: tau must be positive");
  GrowthLaw g;
  g.exponential_ = false;
  g.grid_ = std::move(grid);
  g.tau_ = std::move(tau);
  g.theta_.assign(g.grid_.size(), 0.0);
  for (std::size_t i = 1; i < g.grid_.size(); ++i) {
    double a = g.tau_[i - 1], b = g.tau_[i], dx = g.grid_[i] - g.grid_[i - 1];
    double s = (b - a) / dx;
    g.theta_[i] = g.theta_[i - 1] + (std::abs(s) < 1e-14 ? dx / a : std::log(b / a) / s);
  }
  g.kappa_ = 0.0;
  return g;
}

double GrowthLaw::tau(double x) const {
  if (exponential_) return kappa_ * x;
  return num::interp_clamped(grid_, tau_, x);
}

double GrowthLaw::theta(double x) const {
  if (x <= grid_.front()) return (x - grid_.front()) / tau_.front();
  if (x >= grid_.back()) return theta_.back() + (x - grid_.back()) / tau_.back();
  std::size_t i = static_cast<std::size_t>(std::upper_bound(grid_.begin(), grid_.end(), x) - grid_.begin()) - 1;
  double a = tau_[i], s = (tau_[i + 1] - tau_[i]) / (grid_[i + 1] - grid_[i]);
  double d = x - grid_[i];
  return theta_[i] + (std::abs(s) < 1e-14 ? d / a : std::log((a + s * d) / a) / s);
}

double GrowthLaw::theta_inv(double th) const {
  if (th <= 0.0) return grid_.front() + th * tau_.front();
  if (th >= theta_.back()) return grid_.back() + (th - theta_.back()) * tau_.back();
  std::size_t i = static_cast<std::size_t>(std::upper_bound(theta_.begin(), theta_.end(), th) - theta_.begin()) - 1;
  if (i + 1 >= grid_.size()) i = grid_.size() - 2;
  double a = tau_[i], s = (tau_[i + 1] - tau_[i]) / (grid_[i + 1] - grid_[i]);
  double r = th - theta_[i];
  if (std::abs(s) < 1e-14) return grid_[i] + r * a;
  return grid_[i] + a * (std::exp(s * r) - 1.0) / s;
}

double GrowthLaw::flow(double t, double x, double scale) const {
  if (exponential_) return x * std::exp(scale * kappa_ * t);
  return theta_inv(theta(x) + scale * t);
}

double GrowthLaw::flow_time(double x0, double x1, double scale) const {
  if (exponential_) return std::log(x1 / x0) / (scale * kappa_);
  return (theta(x1) - theta(x0)) / scale;
}

// ---------------------------------------------------------------- FragmentationKernel

FragmentationKernel FragmentationKernel::mitosis() { return FragmentationKernel(); }

FragmentationKernel FragmentationKernel::density(std::vector<double> grid, std::vector<double> b0) {
  if (grid.size() < 2 || grid.size() != b0.size()) throw ValidationError("fragmentation density: need >= 2 points");
  if (std::abs(grid.front()) > 1e-14 || std::abs(grid.back() - 1.0) > 1e-14)
    throw ValidationError("fragmentation density: grid must span [0, 1]");
  for (double v : b0)
    if (!(v >= 0.0)) throw ValidationError("fragmentation density: values must be nonnegative");
  FragmentationKernel k;
  k.mitosis_ = false;
  k.grid_ = std::move(grid);
  k.b0_ = std::move(b0);
  k.cdf_ = num::cumulative_trapezoid(k.grid_, k.b0_);
  double mass = k.cdf_.back();
  if (std::abs(mass - 1.0) > 1e-6) throw ValidationError("fragmentation density: integral must be 1");
  std::vector<double> zb(k.grid_.size());
  for (std::size_t i = 0; i < zb.size(); ++i) zb[i] = k.grid_[i] * k.b0_[i];
  // Exact mean for a piecewise-linear density.
  double m = 0.0;
  for (std::size_t i = 1; i < k.grid_.size(); ++i) {
    double a = k.grid_[i - 1], b = k.grid_[i], fa = k.b0_[i - 1], fb = k.b0_[i];
    double s = (fb - fa) / (b - a);
    double c0 = fa - s * a;
    m += c0 * (b * b - a * a) / 2.0 + s * (b * b * b - a * a * a) / 3.0;
  }
  if (std::abs(m - 0.5) > 1e-6) throw ValidationError("fragmentation density: mean ratio must be 1/2");
  double vmax = *std::max_element(k.b0_.begin(), k.b0_.end());
  for (std::size_t i = 0; i < k.grid_.size(); ++i)
    if (std::abs(k.pdf(1.0 - k.grid_[i]) - k.b0_[i]) > 1e-6 * std::max(1.0, vmax))
      throw ValidationError("fragmentation density: b0 must be symmetric about 1/2");
  return k;
}

FragmentationKernel FragmentationKernel::uniform() { return density({0.0, 1.0}, {1.0, 1.0}); }

double FragmentationKernel::pdf(double z) const {
  if (mitosis_) return 0.0;
  return num::interp(grid_, b0_, z);
}

double FragmentationKernel::cdf(double z) const {
  if (mitosis_) return z >= 0.5 ? 1.0 : 0.0;
  if (z <= 0.0) return 0.0;
  if (z >= 1.0) return 1.0;
  std::size_t i = static_cast<std::size_t>(std::upper_bound(grid_.begin(), grid_.end(), z) - grid_.begin()) - 1;
  double d = z - grid_[i];
  double s = (b0_[i + 1] - b0_[i]) / (grid_[i + 1] - grid_[i]);
  return std::min(1.0, cdf_[i] + b0_[i] * d + 0.5 * s * d * d);
}

double FragmentationKernel::quantile(double u) const {
  if (mitosis_) return 0.5;
  u = std::clamp(u, 0.0, 1.0) * cdf_.back();
  std::size_t i = static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  if (i == 0) i = 1;
  if (i >= grid_.size()) return grid_.back();
  --i;
  double rem = u - cdf_[i], v = b0_[i];
  double s = (b0_[i + 1] - b0_[i]) / (grid_[i + 1] - grid_[i]);
  double disc = std::max(0.0, v * v + 2.0 * s * rem);
  double denom = v + std::sqrt(disc);
  double d = denom > 0.0 ? 2.0 * rem / denom : 0.0;
  return std::min(grid_[i] + d, grid_[i + 1]);
}

std::complex<double> FragmentationKernel::mellin(std::complex<double> s) const {
  if (mitosis_) return std::pow(std::complex<double>(2.0), 1.0 - s);
  // Exact integral of z^(s-1) (alpha + beta z) on each linear piece.
  std::complex<double> total = 0.0;
  auto zpow = [](double z, std::complex<double> p) {
    return z <= 0.0 ? std::complex<double>(0.0) : std::exp(p * std::log(z));
  };
  for (std::size_t i = 1; i < grid_.size(); ++i) {
    double a = grid_[i - 1], b = grid_[i];
    double beta = (b0_[i] - b0_[i - 1]) / (b - a);
    double alpha = b0_[i - 1] - beta * a;
    total += alpha * (zpow(b, s) - zpow(a, s)) / s + beta * (zpow(b, s + 1.0) - zpow(a, s + 1.0)) / (s + 1.0);
  }
  return total;
}

// ---------------------------------------------------------------- SampleSet

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::U1:
      return "U1";
    case Scheme::U2:
      return "U2";
    case Scheme::VT:
      return "VT";
  }
  return "U1";
}

Scheme scheme_from_name(const std::string& s) {
  if (s == "U1") return Scheme::U1;
  if (s == "U2") return Scheme::U2;
  if (s == "VT") return Scheme::VT;
  throw ValidationError("unknown observation scheme '" + s + "'");
}

SampleSet merge(const std::vector<SampleSet>& sets) {
  SampleSet out;
  if (sets.empty()) return out;
  out.scheme = sets.front().scheme;
  out.parameter = sets.front().parameter;
  out.metadata = sets.front().metadata;
  out.has_sizes = true;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    if (sets[s].scheme != out.scheme) throw ValidationError("merge: mixed observation schemes");
    std::string prefix = sets.size() > 1 ? "r" + std::to_string(s) + "/" : "";
    for (auto rec : sets[s].records) {
      rec.id = prefix + rec.id;
      if (!rec.parent.empty()) rec.parent = prefix + rec.parent;
      out.records.push_back(std::move(rec));
    }
    out.censored += sets[s].censored;
    out.truncated = out.truncated || sets[s].truncated;
    out.has_sizes = out.has_sizes && sets[s].has_sizes;
  }
  return out;
}

// ---------------------------------------------------------------- GridDensity

GridDensity::GridDensity(std::vector<double> grid, std::vector<double> vals, bool geom)
    : x(std::move(grid)), values(std::move(vals)), geometric(geom) {
  if (x.size() != values.size()) throw ValidationError("grid density: size mismatch");
  refresh_normalization();
}

GridDensity::GridDensity(std::vector<double> gx, std::vector<double> gy, std::vector<double> vals)
    : x(std::move(gx)), y(std::move(gy)), values(std::move(vals)) {
  if (x.size() * y.size() != values.size()) throw ValidationError("grid density: 2D size mismatch");
  refresh_normalization();
}

double GridDensity::at(double t) const { return num::interp(x, values, t, 0.0); }

double GridDensity::integral() const {
  if (cell_quadrature) {
    std::vector<double> wx = cell_widths();
    double s = 0.0;
    if (dim() == 1) {
      for (std::size_t i = 0; i < x.size(); ++i) s += values[i] * wx[i];
      return s;
    }
    std::vector<double> wy = cell_widths_y();
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < y.size(); ++j) s += values[i * y.size() + j] * wx[i] * wy[j];
    return s;
  }
  if (dim() == 1) return num::trapezoid(x, values);
  std::vector<double> row(y.size()), marg(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < y.size(); ++j) row[j] = values[i * y.size() + j];
    marg[i] = num::trapezoid(y, row);
  }
  return num::trapezoid(x, marg);
}

void GridDensity::normalize() {
  double s = integral();
  if (!(s > 0.0)) throw NumericalError("grid density: cannot normalize a zero-mass profile");
  for (double& v : values) v /= s;
  refresh_normalization();
}

namespace {
std::vector<double> widths_of(const std::vector<double>& x, bool geometric) {
  const std::size_t n = x.size();
  std::vector<double> w(n, 0.0);
  if (n == 0) return w;
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  std::vector<double> edges(n + 1);
  for (std::size_t i = 1; i < n; ++i)
    edges[i] = geometric ? std::sqrt(x[i - 1] * x[i]) : 0.5 * (x[i - 1] + x[i]);
  if (geometric) {
    edges[0] = x[0] * x[0] / edges[1];
    edges[n] = x[n - 1] * x[n - 1] / edges[n - 1];
  } else {
    edges[0] = std::max(0.0, x[0] - (edges[1] - x[0]));
    edges[n] = x[n - 1] + (x[n - 1] - edges[n - 1]);
  }
  for (std::size_t i = 0; i < n; ++i) w[i] = edges[i + 1] - edges[i];
  return w;
}
}  // namespace

std::vector<double> GridDensity::cell_widths() const { return widths_of(x, geometric); }
std::vector<double> GridDensity::cell_widths_y() const { return widths_of(y, geometric_y); }

// ---------------------------------------------------------------- KernelSpec

namespace {
double poly_eval(const std::vector<double>& c, double u) {
  double r = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) r = r * u + c[i];
  return r;
}

// Integral over [a, b] of u^j * p(u).
double poly_moment(const std::vector<double>& c, int j, double a, double b) {
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    int p = static_cast<int>(i) + j + 1;
    s += c[i] * (std::pow(b, p) - std::pow(a, p)) / p;
  }
  return s;
}

std::vector<double> poly_mul(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> r(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) r[i + j] += a[i] * b[j];
  return r;
}
}  // namespace

KernelSpec::KernelSpec(int order, std::vector<double> coefficients) : order_(order), coef_(std::move(coefficients)) {
  if (order_ < 1) throw ValidationError("kernel order must be >= 1");
  if (coef_.empty()) throw ValidationError("kernel profile needs coefficients");
  if (std::abs(moment(0) - 1.0) > 1e-10) throw ValidationError("kernel must integrate to 1");
  for (int j = 1; j < order_; ++j)
    if (std::abs(moment(j)) > 1e-10) throw ValidationError("kernel moment condition violated");
}

KernelSpec KernelSpec::biweight() { return KernelSpec(2, {15.0 / 16.0, 0.0, -30.0 / 16.0, 0.0, 15.0 / 16.0}); }

KernelSpec KernelSpec::box() { return KernelSpec(2, {0.5}); }

KernelSpec KernelSpec::order4() { return corrected(biweight(), 4); }

KernelSpec KernelSpec::corrected(const KernelSpec& base, int order) {
  if (order % 2 != 0 || order < 2) throw ValidationError("corrected kernel: order must be even and >= 2");
  const int m = order / 2;
  // Even correction q(u) = sum_l c_l u^(2l); conditions: int u^(2j) base q = delta_j0.
  std::vector<std::vector<double>> A(m, std::vector<double>(m + 1, 0.0));
  for (int j = 0; j < m; ++j) {
    for (int l = 0; l < m; ++l) A[j][l] = base.moment(2 * j + 2 * l);
    A[j][m] = j == 0 ? 1.0 : 0.0;
  }
  for (int c = 0; c < m; ++c) {
    int piv = c;
    for (int r = c + 1; r < m; ++r)
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    std::swap(A[c], A[piv]);
    for (int r = 0; r < m; ++r) {
      if (r == c) continue;
      double f = A[r][c] / A[c][c];
      for (int k = c; k <= m; ++k) A[r][k] -= f * A[c][k];
    }
  }
  std::vector<double> q(2 * m - 1, 0.0);
  for (int l = 0; l < m; ++l) q[2 * l] = A[l][m] / A[l][l];
  return KernelSpec(order, poly_mul(base.coef_, q));
}

double KernelSpec::operator()(double u) const {
  if (u < -1.0 || u > 1.0) return 0.0;
  return poly_eval(coef_, u);
}

double KernelSpec::derivative(double u) const {
  if (u < -1.0 || u > 1.0) return 0.0;
  double r = 0.0;
  for (std::size_t i = coef_.size(); i-- > 1;) r = r * u + static_cast<double>(i) * coef_[i];
  return r;
}

double KernelSpec::integral_to(double t) const {
  if (t <= -1.0) return 0.0;
  if (t >= 1.0) return poly_moment(coef_, 0, -1.0, 1.0);
  return poly_moment(coef_, 0, -1.0, t);
}

double KernelSpec::moment(int j, double lo, double hi) const {
  lo = std::max(lo, -1.0);
  hi = std::min(hi, 1.0);
  if (hi <= lo) return 0.0;
  return poly_moment(coef_, j, lo, hi);
}

double KernelSpec::roughness() const { return poly_moment(poly_mul(coef_, coef_), 0, -1.0, 1.0); }

}  // namespace divrate
