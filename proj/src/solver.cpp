#include "divrate/solver.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numeric>

#include "divrate/numerics.hpp"

namespace divrate {

namespace {

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

double l1_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

std::vector<double> widths_for(const std::vector<double>& x, bool geometric) {
  GridDensity g(x, std::vector<double>(x.size(), 0.0), geometric);
  return g.cell_widths();
}

std::vector<std::size_t> snapshot_steps(std::size_t steps, std::size_t n_snapshots) {
  n_snapshots = std::max<std::size_t>(2, n_snapshots);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < n_snapshots; ++j) {
    std::size_t s = static_cast<std::size_t>(std::llround(static_cast<double>(j) * static_cast<double>(steps) /
                                                          static_cast<double>(n_snapshots - 1)));
    if (out.empty() || s != out.back()) out.push_back(s);
  }
  return out;
}

// Block power iteration: returns the period-averaged Perron vector and rho per step.
struct PowerResult {
  std::vector<double> vec;
  double rho = 1.0;
  std::size_t steps = 0;
  double change = 0.0;
  bool converged = false;
};

template <class Step>
PowerResult block_power(std::vector<double> v, std::size_t period, Step&& step, std::size_t max_steps, double tol) {
  PowerResult r;
  double s = sum(v);
  if (!(s > 0.0)) throw NumericalError("power iteration: zero initial vector");
  for (double& t : v) t /= s;
  double rho_p = 1.0;
  std::vector<double> w;
  while (r.steps < max_steps) {
    w = v;
    for (std::size_t j = 0; j < period; ++j) step(w);
    r.steps += period;
    double sw = sum(w);
    if (!(sw > 0.0) || !std::isfinite(sw)) throw NumericalError("power iteration: iterate vanished or overflowed");
    for (double& t : w) t /= sw;
    r.change = l1_diff(w, v);
    double rho_change = std::abs(sw - rho_p) / sw;
    rho_p = sw;
    v.swap(w);
    if (r.change < tol && rho_change < tol) {
      r.converged = true;
      break;
    }
  }
  r.rho = std::pow(rho_p, 1.0 / static_cast<double>(period));
  // Averaging over one block cancels the rotating modes of a periodic operator.
  std::vector<double> acc(v.size(), 0.0), cur = v;
  double weight = 1.0;
  for (std::size_t j = 0; j < period; ++j) {
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += weight * cur[i];
    step(cur);
    weight /= r.rho;
  }
  r.vec = std::move(acc);
  return r;
}

}  // namespace

// ---------------------------------------------------------------- grids

SolverGrid SolverGrid::uniform(double x_max, std::size_t n, double dt) {
  if (!(x_max > 0.0) || n < 2) throw ValidationError("uniform grid: need x_max > 0 and at least 2 points");
  SolverGrid g;
  g.kind = Kind::uniform;
  g.x_min = 0.0;
  g.x_max = x_max;
  g.n = n;
  g.dt = dt;
  return g;
}

SolverGrid SolverGrid::geometric(double x_min, double x_max, int m, double dt) {
  if (!(x_min > 0.0) || !(x_max > x_min) || m < 1) throw ValidationError("geometric grid: need 0 < x_min < x_max, m >= 1");
  SolverGrid g;
  g.kind = Kind::geometric;
  g.x_min = x_min;
  g.m = m;
  g.n = static_cast<std::size_t>(std::ceil(m * std::log2(x_max / x_min) - 1e-9)) + 1;
  g.x_max = x_min * std::exp2(static_cast<double>(g.n - 1) / m);
  g.dt = dt;
  return g;
}

std::vector<double> SolverGrid::points() const {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = is_geometric() ? x_min * std::exp2(static_cast<double>(i) / m)
                          : (static_cast<double>(i) + 0.5) * x_max / static_cast<double>(n);
  return x;
}

double SolverGrid::ratio() const { return std::exp2(1.0 / m); }

SolverGrid default_size_grid(const RateFunction& B, int m, int octaves) {
  double x_max = 1.0;
  while (B.cumulative(0.0, x_max) < 40.0) x_max *= 2.0;
  return SolverGrid::geometric(x_max * std::exp2(-octaves), x_max, m);
}

// ---------------------------------------------------------------- renewal

double renewal_laplace(const RateFunction& B, double lambda) {
  switch (B.form()) {
    case RateFunction::Form::constant: {
      double b = B.param_c();
      if (!(lambda + b > 0.0)) throw NumericalError("renewal: Laplace integral diverges");
      return b / (lambda + b);
    }
    case RateFunction::Form::step: {
      double c = B.param_c(), a0 = B.param_a0();
      if (!(lambda + c > 0.0)) throw NumericalError("renewal: Laplace integral diverges");
      return c * std::exp(-lambda * a0) / (lambda + c);
    }
    default:
      return num::integrate_to_infinity([&](double a) { return B(a) * std::exp(-lambda * a - B.cumulative(a)); }, 0.0,
                                        1e-13);
  }
}

double malthus_renewal(const RateFunction& B, int k) {
  if (k == 1) return 0.0;
  if (k < 1) throw ValidationError("malthus: k must be positive");
  auto g = [&](double l) { return static_cast<double>(k) * renewal_laplace(B, l) - 1.0; };
  double lo = 0.0, hi = 1.0;
  while (g(hi) > 0.0) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e8) throw NumericalError("malthus: root not bracketed");
  }
  return num::find_root(g, lo, hi, 1e-15);
}

double renewal_age_cutoff(const RateFunction& B, double lambda, double level) {
  auto f = [&](double a) { return lambda * a + B.cumulative(a) - level; };
  double hi = 1.0;
  while (f(hi) < 0.0) {
    hi *= 2.0;
    if (hi > 1e9) throw ValidationError("renewal: cumulative hazard does not diverge");
  }
  return num::find_root(f, 0.0, hi, 1e-12);
}

EigenTriplet renewal_eigen(const RateFunction& B, int k, std::size_t n) {
  if (n < 2) throw ValidationError("renewal eigen: need at least 2 grid points");
  double lambda = malthus_renewal(B, k);
  return renewal_eigen(B, k, num::linspace(0.0, renewal_age_cutoff(B, lambda), n));
}

EigenTriplet renewal_eigen(const RateFunction& B, int k, const std::vector<double>& ages) {
  EigenTriplet t;
  t.k = k;
  t.lambda = malthus_renewal(B, k);
  const double lambda = t.lambda;
  double mass;
  if (B.form() == RateFunction::Form::constant) {
    mass = 1.0 / (lambda + B.param_c());
  } else {
    mass = num::integrate_to_infinity([&](double a) { return std::exp(-lambda * a - B.cumulative(a)); }, 0.0, 1e-13);
  }
  if (!(mass > 0.0) || !std::isfinite(mass)) throw NumericalError("renewal eigen: profile is not integrable");
  const double C = 1.0 / mass;
  std::vector<double> N(ages.size());
  for (std::size_t i = 0; i < ages.size(); ++i) N[i] = C * std::exp(-lambda * ages[i] - B.cumulative(ages[i]));
  t.N = GridDensity(ages, N);
  t.diagnostics["N0"] = C;
  t.diagnostics["exact_integral"] = 1.0;

  if (k == 1) {
    t.phi.assign(ages.size(), 1.0);
  } else {
    // phi(a) = k phi(0) int_a^inf B(s) exp(-lambda (s - a) - (H(s) - H(a))) ds
    double moment;
    if (B.form() == RateFunction::Form::constant) {
      double b = B.param_c();
      moment = b / ((lambda + b) * (lambda + b));
    } else {
      moment = num::integrate_to_infinity([&](double s) { return s * B(s) * std::exp(-lambda * s - B.cumulative(s)); },
                                          0.0, 1e-13);
    }
    const double phi0 = 1.0 / (C * k * moment);
    t.phi.resize(ages.size());
    for (std::size_t i = 0; i < ages.size(); ++i) {
      double a = ages[i], tail;
      if (B.form() == RateFunction::Form::constant) {
        tail = B.param_c() / (lambda + B.param_c());
      } else {
        tail = num::integrate_to_infinity(
            [&](double s) { return B(s) * std::exp(-lambda * (s - a) - B.cumulative(a, s)); }, a, 1e-12);
      }
      t.phi[i] = k * phi0 * tail;
    }
    double sup = *std::max_element(t.phi.begin(), t.phi.end());
    double at0 = k * phi0 * renewal_laplace(B, lambda);
    t.diagnostics["phi0"] = at0;
    t.diagnostics["phi_sup_over_phi0"] = sup / at0;
    if (sup > k * at0 * (1.0 + 1e-9))
      throw NumericalError("renewal eigen: adjoint violates the uniform bound sup phi <= k phi(0)");
  }
  return t;
}

RenewalSolver::RenewalSolver(RateFunction B, int k, double da, double a_max) : B_(std::move(B)), k_(k), da_(da) {
  if (!(da > 0.0) || !(a_max > da)) throw ValidationError("renewal solver: need 0 < da < a_max");
  if (k < 1) throw ValidationError("renewal solver: k must be positive");
  const std::size_t n = static_cast<std::size_t>(std::ceil(a_max / da));
  q_ = 1.0 - std::exp(-B_.cumulative(0.0, 0.5 * da));
  if (!(k * q_ < 1.0)) throw ValidationError("renewal solver: age step too large for the division rate");
  ages_.resize(n);
  s_.resize(n);
  f_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ages_[i] = (static_cast<double>(i) + 0.5) * da;
    s_[i] = std::exp(-B_.cumulative(ages_[i], ages_[i] + da));
    f_[i] = k * (1.0 - s_[i]) * (1.0 - q_) / (1.0 - k * q_);
  }
}

void RenewalSolver::step(std::vector<double>& M, double* lost) const {
  const std::size_t n = size();
  double newborn = 0.0;
  for (std::size_t i = 0; i < n; ++i) newborn += f_[i] * M[i];
  if (lost) *lost += s_[n - 1] * M[n - 1];
  for (std::size_t i = n - 1; i > 0; --i) M[i] = s_[i - 1] * M[i - 1];
  M[0] = newborn;
}

void RenewalSolver::adjoint_step(std::vector<double>& phi) const {
  const std::size_t n = size();
  const double p0 = phi[0];
  for (std::size_t i = 0; i + 1 < n; ++i) phi[i] = s_[i] * phi[i + 1] + f_[i] * p0;
  phi[n - 1] = f_[n - 1] * p0;
}

double RenewalSolver::births(const std::vector<double>& M) const {
  double d = 0.0;
  for (std::size_t i = 0; i < size(); ++i) d += (1.0 - s_[i]) * M[i];
  return k_ * d / (1.0 - k_ * q_);
}

EigenTriplet RenewalSolver::discrete_triplet() const {
  const std::size_t n = size();
  std::vector<double> logpi(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) logpi[i] = logpi[i - 1] + std::log(s_[i - 1]);
  auto g = [&](double l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += f_[i] * std::exp(logpi[i] - l * (static_cast<double>(i) + 1.0) * da_);
    return acc - 1.0;
  };
  double lc = malthus_renewal(B_, k_);
  double lo = lc - 0.1, hi = lc + 0.1;
  while (g(lo) < 0.0) lo -= 1.0;
  while (g(hi) > 0.0) hi += 1.0;
  const double lambda = num::find_root(g, lo, hi, 1e-16);
  const double rho = std::exp(lambda * da_);

  std::vector<double> M(n), phi(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) M[i] = std::exp(logpi[i] - lambda * static_cast<double>(i) * da_);
  for (std::size_t i = n; i-- > 0;) phi[i] = (s_[i] * phi[i + 1] + f_[i]) / rho;
  phi.pop_back();
  phi[0] = 1.0;
  double sm = sum(M);
  for (double& v : M) v /= sm;
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += phi[i] * M[i];
  for (double& v : phi) v /= dot;

  EigenTriplet t;
  t.k = k_;
  t.lambda = lambda;
  t.N = to_density(M);
  t.phi = std::move(phi);
  std::vector<double> SM = M;
  step(SM);
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) res += std::abs(SM[i] - rho * M[i]);
  t.residual = res;
  t.diagnostics["rho"] = rho;
  return t;
}

std::vector<double> RenewalSolver::to_cells(const GridDensity& n0) const {
  std::vector<double> M(size(), 0.0);
  if (n0.size() == 1) {
    // A single-point density is read as a point mass at that age.
    std::size_t i = std::min(size() - 1, static_cast<std::size_t>(n0.x[0] / da_));
    M[i] = n0.values[0];
    return M;
  }
  for (std::size_t i = 0; i < size(); ++i) M[i] = n0.at(ages_[i]) * da_;
  return M;
}

GridDensity RenewalSolver::to_density(const std::vector<double>& M) const {
  std::vector<double> v(M.size());
  for (std::size_t i = 0; i < M.size(); ++i) v[i] = M[i] / da_;
  GridDensity d(ages_, std::move(v));
  d.cell_quadrature = true;
  d.refresh_normalization();
  return d;
}

RenewalSolver make_renewal_solver(const GridDensity& n0, const RateFunction& B, int k, double T, double da) {
  double lambda = malthus_renewal(B, k);
  double reach = (n0.size() ? n0.x.back() : 0.0) + T;
  return RenewalSolver(B, k, da, std::max(reach, renewal_age_cutoff(B, lambda)) + 2.0 * da);
}

Trajectory solve_renewal(const GridDensity& n0, const RateFunction& B, int k, double T, double da,
                         std::size_t n_snapshots) {
  for (double v : n0.values)
    if (v < 0.0) throw ValidationError("solve_renewal: initial density must be nonnegative");
  RenewalSolver solver = make_renewal_solver(n0, B, k, T, da);
  std::vector<double> M = solver.to_cells(n0);
  const std::size_t steps = static_cast<std::size_t>(std::llround(T / da));
  Trajectory tr;
  double lost = 0.0;
  std::size_t done = 0;
  for (std::size_t target : snapshot_steps(steps, n_snapshots)) {
    for (; done < target; ++done) solver.step(M, &lost);
    tr.times.push_back(static_cast<double>(done) * da);
    tr.states.push_back(solver.to_density(M));
    tr.lost.push_back(lost);
  }
  return tr;
}

// ---------------------------------------------------------------- growth-fragmentation

GrowthFragOperator::GrowthFragOperator(RateFunction B, GrowthLaw tau, FragmentationKernel b, int k, SolverGrid grid)
    : B_(std::move(B)), tau_(std::move(tau)), b_(std::move(b)), k_(k), grid_(grid) {
  if (k < 1) throw ValidationError("growth-fragmentation: k must be positive");
  x_ = grid_.points();
  if (x_.size() < 2) throw ValidationError("growth-fragmentation: grid too small");
  w_ = widths_for(x_, grid_.is_geometric());
  const std::size_t n = x_.size();
  characteristic_ = grid_.is_geometric() && tau_.is_exponential();
  oscillatory_ = b_.is_mitosis() && tau_.is_exponential();
  beta_.resize(n);
  for (std::size_t i = 0; i < n; ++i) beta_[i] = tau_.tau(x_[i]) * B_(x_[i]);

  const double r = grid_.is_geometric() ? grid_.ratio() : 1.0;
  if (characteristic_) {
    dt_ = std::log(r) / tau_.kappa();
    survive_.resize(n);
    newborn_q_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      survive_[i] = std::exp(-B_.cumulative(x_[i], x_[i] * r));
      // Newborns reaching x_i at the end of the step were born at a uniform time within it.
      double H = B_.cumulative(x_[i] / r, x_[i]);
      newborn_q_[i] = H > 1e-8 ? 1.0 - (1.0 - std::exp(-H)) / H : 0.5 * H;
    }
  } else {
    std::vector<double> speed(n);
    const double h = grid_.x_max / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      speed[i] = grid_.is_geometric() ? tau_.tau(x_[i]) / (x_[i] * std::log(r)) : tau_.tau(x_[i]) / h;
    const double vmax = *std::max_element(speed.begin(), speed.end());
    dt_ = grid_.dt > 0.0 ? grid_.dt : 0.9 / vmax;
    double cmax = vmax * dt_;
    substeps_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cmax - 1e-12)));
    courant_.resize(n);
    for (std::size_t i = 0; i < n; ++i) courant_[i] = speed[i] * dt_ / static_cast<double>(substeps_);
  }
  if (grid_.is_geometric() && !b_.is_mitosis()) {
    for (std::size_t d = 0; d < n; ++d) {
      double hi = d == 0 ? 1.0 : std::pow(r, -static_cast<double>(d) + 0.5);
      double lo = std::pow(r, -static_cast<double>(d) - 0.5);
      kernel_w_.push_back(b_.cdf(hi) - b_.cdf(lo));
      if (b_.cdf(lo) <= 0.0) break;
    }
  }
}

void GrowthFragOperator::place_newborns(std::vector<double>& nb, std::vector<double>& out, double* lost) const {
  const std::size_t n = x_.size();
  const double w0 = b_.is_mitosis() ? 0.0 : kernel_w_[0];
  for (std::size_t c = n; c-- > 0;) {
    if (nb[c] == 0.0) continue;
    const double q = newborn_q_[c];
    const double T = nb[c] / (1.0 - k_ * q * w0);
    out[c] += (1.0 - q) * T;
    const double g = k_ * q * T;
    if (g == 0.0) continue;
    if (b_.is_mitosis()) {
      std::size_t m = static_cast<std::size_t>(grid_.m);
      if (c >= m) nb[c - m] += g;
      else if (lost) *lost += g;
      continue;
    }
    for (std::size_t d = 1; d < kernel_w_.size(); ++d) {
      if (d <= c) nb[c - d] += g * kernel_w_[d];
      else if (lost) *lost += g * kernel_w_[d];
    }
  }
}

std::vector<double> GrowthFragOperator::newborn_value(const std::vector<double>& phi) const {
  const std::size_t n = x_.size();
  const double w0 = b_.is_mitosis() ? 0.0 : kernel_w_[0];
  std::vector<double> G(n + 1, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    const double q = newborn_q_[c];
    double below = 0.0;
    if (b_.is_mitosis()) {
      std::size_t m = static_cast<std::size_t>(grid_.m);
      if (c >= m) below = G[c - m];
    } else {
      for (std::size_t d = 1; d < kernel_w_.size() && d <= c; ++d) below += kernel_w_[d] * G[c - d];
    }
    G[c] = ((1.0 - q) * phi[c] + k_ * q * below) / (1.0 - k_ * q * w0);
  }
  return G;
}

std::size_t GrowthFragOperator::period() const {
  if (characteristic_) return static_cast<std::size_t>(grid_.m);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(0.25 / dt_)), 1, 1000);
}

void GrowthFragOperator::scatter(std::size_t i, double children, std::vector<double>& out, double* lost) const {
  const std::size_t n = x_.size();
  if (grid_.is_geometric()) {
    if (b_.is_mitosis()) {
      std::size_t m = static_cast<std::size_t>(grid_.m);
      if (i >= m && i - m < n) out[i - m] += children;
      else if (lost) *lost += children;
      return;
    }
    for (std::size_t d = 0; d < kernel_w_.size(); ++d) {
      if (d <= i && i - d < n) out[i - d] += children * kernel_w_[d];
      else if (lost) *lost += children * kernel_w_[d];
    }
    return;
  }
  const double h = grid_.x_max / static_cast<double>(n);
  const double xi = (static_cast<double>(i) + 0.5) * h;
  if (b_.is_mitosis()) {
    double p = 0.5 * xi / h - 0.5;
    if (p < 0.0) {
      out[0] += children;
      return;
    }
    std::size_t j = static_cast<std::size_t>(p);
    double th = p - static_cast<double>(j);
    out[j] += children * (1.0 - th);
    out[j + 1] += children * th;
    return;
  }
  for (std::size_t j = 0; j <= i; ++j) {
    double lo = static_cast<double>(j) * h / xi, hi = std::min(1.0, static_cast<double>(j + 1) * h / xi);
    if (lo >= 1.0) break;
    out[j] += children * (b_.cdf(hi) - b_.cdf(lo));
  }
}

double GrowthFragOperator::gather(std::size_t i, const std::vector<double>& phi) const {
  const std::size_t n = x_.size();
  if (grid_.is_geometric()) {
    if (b_.is_mitosis()) {
      std::size_t m = static_cast<std::size_t>(grid_.m);
      return (i >= m && i - m < n) ? phi[i - m] : 0.0;
    }
    double s = 0.0;
    for (std::size_t d = 0; d < kernel_w_.size(); ++d)
      if (d <= i && i - d < n) s += kernel_w_[d] * phi[i - d];
    return s;
  }
  const double h = grid_.x_max / static_cast<double>(n);
  const double xi = (static_cast<double>(i) + 0.5) * h;
  if (b_.is_mitosis()) {
    double p = 0.5 * xi / h - 0.5;
    if (p < 0.0) return phi[0];
    std::size_t j = static_cast<std::size_t>(p);
    double th = p - static_cast<double>(j);
    return phi[j] * (1.0 - th) + phi[j + 1] * th;
  }
  double s = 0.0;
  for (std::size_t j = 0; j <= i; ++j) {
    double lo = static_cast<double>(j) * h / xi, hi = std::min(1.0, static_cast<double>(j + 1) * h / xi);
    if (lo >= 1.0) break;
    s += phi[j] * (b_.cdf(hi) - b_.cdf(lo));
  }
  return s;
}

void GrowthFragOperator::transport(std::vector<double>& M, double* lost) const {
  const std::size_t n = x_.size();
  for (std::size_t s = 0; s < substeps_; ++s) {
    double carry = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double out = courant_[i] * M[i];
      M[i] += carry - out;
      carry = out;
    }
    if (lost) *lost += carry;
  }
}

void GrowthFragOperator::transport_adjoint(std::vector<double>& phi) const {
  const std::size_t n = x_.size();
  for (std::size_t s = 0; s < substeps_; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      double next = i + 1 < n ? phi[i + 1] : 0.0;
      phi[i] = (1.0 - courant_[i]) * phi[i] + courant_[i] * next;
    }
  }
}

void GrowthFragOperator::divide(std::vector<double>& M, double delta, double* lost) const {
  const std::size_t n = x_.size();
  std::vector<double> D(n);
  for (std::size_t i = 0; i < n; ++i) {
    D[i] = M[i] * (1.0 - std::exp(-beta_[i] * delta));
    M[i] -= D[i];
  }
  for (std::size_t i = 0; i < n; ++i)
    if (D[i] > 0.0) scatter(i, k_ * D[i], M, lost);
}

void GrowthFragOperator::divide_adjoint(std::vector<double>& phi, double delta) const {
  const std::size_t n = x_.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = std::exp(-beta_[i] * delta);
    out[i] = s * phi[i] + (1.0 - s) * k_ * gather(i, phi);
  }
  phi.swap(out);
}

void GrowthFragOperator::step(std::vector<double>& M, double* lost) const {
  const std::size_t n = x_.size();
  if (characteristic_) {
    std::vector<double> out(n, 0.0), nb(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double stay = survive_[i] * M[i];
      if (i + 1 < n) out[i + 1] += stay;
      else if (lost) *lost += stay;
      double D = M[i] - stay;
      if (D > 0.0) scatter(i + 1, k_ * D, nb, lost);
    }
    place_newborns(nb, out, lost);
    M.swap(out);
    return;
  }
  divide(M, 0.5 * dt_, lost);
  transport(M, lost);
  divide(M, 0.5 * dt_, lost);
}

void GrowthFragOperator::adjoint_step(std::vector<double>& phi) const {
  const std::size_t n = x_.size();
  if (characteristic_) {
    std::vector<double> out(n);
    std::vector<double> ext(phi);
    ext.push_back(0.0);  // one cell beyond the top: mass leaves the grid
    std::vector<double> G = newborn_value(phi);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = survive_[i] * ext[i + 1] + (1.0 - survive_[i]) * k_ * gather(i + 1, G);
    phi.swap(out);
    return;
  }
  divide_adjoint(phi, 0.5 * dt_);
  transport_adjoint(phi);
  divide_adjoint(phi, 0.5 * dt_);
}

std::vector<double> GrowthFragOperator::to_cells(const GridDensity& n0) const {
  std::vector<double> M(x_.size());
  for (std::size_t i = 0; i < x_.size(); ++i) {
    M[i] = n0.at(x_[i]) * w_[i];
    if (M[i] < 0.0) throw ValidationError("growth-fragmentation: initial density must be nonnegative");
  }
  return M;
}

GridDensity GrowthFragOperator::to_density(const std::vector<double>& M) const {
  std::vector<double> v(M.size());
  for (std::size_t i = 0; i < M.size(); ++i) v[i] = M[i] / w_[i];
  GridDensity d(x_, std::move(v), grid_.is_geometric());
  d.cell_quadrature = true;
  d.refresh_normalization();
  return d;
}

EigenTriplet gf_eigen(const RateFunction& B, const GrowthLaw& tau, const FragmentationKernel& b, int k,
                      const SolverGrid& grid, std::size_t max_steps, double tol) {
  std::vector<double> x = grid.points();
  if (!(x.back() * B(x.back()) > 1.0))
    throw ValidationError("gf_eigen: balance condition fails, x B(x) does not grow on the grid tail");
  return gf_eigen(GrowthFragOperator(B, tau, b, k, grid), max_steps, tol);
}

EigenTriplet gf_eigen(const GrowthFragOperator& op, std::size_t max_steps, double tol) {
  const std::size_t n = op.size(), p = op.period();
  std::vector<double> start(n, 1.0);
  PowerResult fwd = block_power(start, p, [&](std::vector<double>& v) { op.step(v); }, max_steps, tol);
  if (!fwd.converged)
    throw NumericalError("gf_eigen: no convergence after " + std::to_string(fwd.steps) +
                         " steps, last change " + std::to_string(fwd.change));
  PowerResult adj = block_power(start, p, [&](std::vector<double>& v) { op.adjoint_step(v); }, max_steps, tol);
  if (!adj.converged)
    throw NumericalError("gf_eigen: adjoint did not converge, last change " + std::to_string(adj.change));

  std::vector<double> M = fwd.vec, phi = adj.vec;
  double sm = sum(M);
  for (double& v : M) v /= sm;
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += phi[i] * M[i];
  for (double& v : phi) v /= dot;

  EigenTriplet t;
  t.k = op.k();
  t.lambda = std::log(fwd.rho) / op.dt();
  t.oscillatory = op.oscillatory();
  t.iterations = fwd.steps;
  t.N = op.to_density(M);
  t.phi = std::move(phi);
  std::vector<double> SM = M;
  double lost = 0.0;
  op.step(SM, &lost);
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) res += std::abs(SM[i] - fwd.rho * M[i]);
  t.residual = res;
  t.diagnostics["rho"] = fwd.rho;
  t.diagnostics["adjoint_rho"] = adj.rho;
  t.diagnostics["lost_per_step"] = lost;
  t.diagnostics["dt"] = op.dt();
  return t;
}

Trajectory solve_growth_frag(const GridDensity& n0, const RateFunction& B, const GrowthLaw& tau,
                             const FragmentationKernel& b, int k, double T, const SolverGrid& grid,
                             std::size_t n_snapshots) {
  SolverGrid g = grid;
  GrowthFragOperator probe(B, tau, b, k, g);
  std::size_t steps;
  if (probe.characteristic()) {
    steps = static_cast<std::size_t>(std::llround(T / probe.dt()));
  } else {
    steps = static_cast<std::size_t>(std::ceil(T / probe.dt() - 1e-9));
    g.dt = T / static_cast<double>(std::max<std::size_t>(steps, 1));
  }
  GrowthFragOperator op(B, tau, b, k, g);
  std::vector<double> M = op.to_cells(n0);
  Trajectory tr;
  double lost = 0.0;
  std::size_t done = 0;
  for (std::size_t target : snapshot_steps(steps, n_snapshots)) {
    for (; done < target; ++done) op.step(M, &lost);
    tr.times.push_back(static_cast<double>(done) * op.dt());
    tr.states.push_back(op.to_density(M));
    tr.lost.push_back(lost);
  }
  return tr;
}

std::complex<double> oscillation_projection(const GridDensity& n, double kappa, int k, double t, int mode) {
  const std::complex<double> s(k - 1.0, 2.0 * M_PI * mode / std::log(2.0));
  std::vector<double> w = n.cell_widths();
  std::complex<double> acc = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) acc += w[i] * n.values[i] * std::exp(s * std::log(n.x[i]));
  return acc * std::exp(-kappa * s * t);
}

// ---------------------------------------------------------------- two-variable model

std::string model_type_name(ModelType t) {
  switch (t) {
    case ModelType::timer:
      return "timer";
    case ModelType::sizer:
      return "sizer";
    case ModelType::adder:
      return "adder";
  }
  return "adder";
}

ModelType model_type_from_name(const std::string& s) {
  if (s == "timer") return ModelType::timer;
  if (s == "sizer") return ModelType::sizer;
  if (s == "adder") return ModelType::adder;
  throw ValidationError("unknown model type '" + s + "' (expected timer, sizer or adder)");
}

CharacteristicSolver::CharacteristicSolver(ModelType type, RateFunction B, double kappa, int k, SolverGrid grid)
    : type_(type), B_(std::move(B)), kappa_(kappa), k_(k), m_(grid.m) {
  if (!grid.is_geometric()) throw ValidationError("two-variable solver: requires a geometric grid");
  if (!(kappa > 0.0)) throw ValidationError("two-variable solver: growth rate must be positive");
  x_ = grid.points();
  w_ = widths_for(x_, true);
  const double r = grid.ratio();
  dt_ = std::log(r) / kappa;
  const std::size_t n = x_.size();
  // Cells in column j were born during one step: their birth size (or age offset) spreads over the step. Survival
  // is averaged over that spread with Gauss-Legendre nodes u in (0, 1), the elapsed fraction of the birth step,
  // conditioned on having survived so far.
  static constexpr std::array<double, 4> gu = {0.0694318442029737, 0.3300094782075719, 0.6699905217924281,
                                               0.9305681557970263};
  static constexpr std::array<double, 4> gw = {0.1739274225687269, 0.3260725774312731, 0.3260725774312731,
                                               0.1739274225687269};
  auto log_mean = [&](auto&& hazard) {
    std::array<double, 4> a{};
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < 4; ++q) top = std::max(top, a[q] = -hazard(gu[q]));
    if (!std::isfinite(top)) return top;
    double s = 0.0;
    for (std::size_t q = 0; q < 4; ++q) s += gw[q] * std::exp(a[q] - top);
    return top + std::log(s);
  };
  // Hazard accumulated since birth by sub-cohort u of column j at size x (adder) or after `steps` steps (timer).
  auto adder_h = [&](std::size_t j, double x) {
    return [&, j, x](double u) { return B_.cumulative(0.0, std::max(0.0, x - x_[j] * std::pow(r, -u))); };
  };
  auto timer_h = [&](double steps) { return [&, steps](double u) { return B_.cumulative(0.0, (steps + u) * dt_); }; };

  surv_.resize(cells());
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = x_[i], x1 = x_[i] * r;
    const double hz_size = type_ == ModelType::sizer ? B_.cumulative(x0, x1) : 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (type_ == ModelType::sizer) {
        surv_[index(j, i)] = std::exp(-hz_size);
        continue;
      }
      const double age = static_cast<double>(i - j);
      const double l0 = type_ == ModelType::adder ? log_mean(adder_h(j, x0)) : log_mean(timer_h(age));
      const double l1 = type_ == ModelType::adder ? log_mean(adder_h(j, x1)) : log_mean(timer_h(age + 1.0));
      double sv;
      if (std::isfinite(l0) && std::isfinite(l1)) {
        sv = std::exp(std::min(0.0, l1 - l0));
      } else {  // deep tail: centre of the spread
        const double c = std::sqrt(1.0 / r);
        sv = type_ == ModelType::adder
                 ? std::exp(-B_.cumulative(std::max(0.0, x0 - x_[j] * c), x1 - x_[j] * c))
                 : std::exp(-B_.cumulative((age + 0.5) * dt_, (age + 1.5) * dt_));
      }
      surv_[index(j, i)] = sv;
    }
  }
  newborn_q_.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    if (type_ == ModelType::sizer) {
      const double H = B_.cumulative(x_[c] / r, x_[c]);
      newborn_q_[c] = H > 1e-8 ? 1.0 - (1.0 - std::exp(-H)) / H : 0.5 * H;
      continue;
    }
    // Newborns of the step have lived a fraction u of it.
    const double l = type_ == ModelType::adder ? log_mean(adder_h(c, x_[c])) : log_mean(timer_h(0.0));
    newborn_q_[c] = std::isfinite(l) ? -std::expm1(l) : 1.0;
  }
}

double CharacteristicSolver::survival(std::size_t j, std::size_t i) const { return surv_[index(j, i)]; }

void CharacteristicSolver::step(std::vector<double>& M, StepReport* report) const {
  const std::size_t n = x_.size(), m = static_cast<std::size_t>(m_);
  std::vector<double> out(cells(), 0.0), nb(n, 0.0);
  std::vector<double> div_at(report ? n + 1 : 0, 0.0), inj_at(report ? n : 0, 0.0);
  double lost = 0.0, divs = 0.0, inj = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * (i + 1) / 2;
    double D_row = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = M[base + j];
      if (v == 0.0) continue;
      const double stay = surv_[base + j] * v;
      if (i + 1 < n) out[index(j, i + 1)] += stay;
      else lost += stay;
      D_row += v - stay;
    }
    if (D_row == 0.0) continue;
    divs += D_row;
    if (report) div_at[i + 1] += D_row;
    // Children of a cell dividing on its way to x_{i+1} sit at x_{i+1}/2 at the end of the step.
    if (i + 1 >= m) nb[i + 1 - m] += k_ * D_row;
    else lost += k_ * D_row;
  }
  // Newborns dividing within their birth step pass their children one octave down.
  for (std::size_t c = n; c-- > 0;) {
    const double T = nb[c];
    if (T == 0.0) continue;
    const double q = newborn_q_[c];
    out[index(c, c)] += (1.0 - q) * T;
    inj += T;
    if (report) {
      inj_at[c] += T;
      div_at[c] += q * T;
    }
    divs += q * T;
    if (c >= m) nb[c - m] += k_ * q * T;
    else lost += k_ * q * T;
  }
  M.swap(out);
  if (report) {
    report->lost = lost;
    report->divisions = divs;
    report->injected = inj;
    double mis = 0.0;
    for (std::size_t c = 0; c + m <= n && c < n; ++c) mis = std::max(mis, std::abs(inj_at[c] - k_ * div_at[c + m]));
    report->boundary_mismatch = mis;
  }
}

void CharacteristicSolver::adjoint_step(std::vector<double>& phi) const {
  const std::size_t n = x_.size(), m = static_cast<std::size_t>(m_);
  std::vector<double> out(cells()), G(n, 0.0);
  for (std::size_t c = 0; c < n; ++c)
    G[c] = (1.0 - newborn_q_[c]) * phi[index(c, c)] + (c >= m ? k_ * newborn_q_[c] * G[c - m] : 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double child = i + 1 >= m ? G[i + 1 - m] : 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double s = surv_[index(j, i)];
      const double next = i + 1 < n ? phi[index(j, i + 1)] : 0.0;
      out[index(j, i)] = s * next + (1.0 - s) * k_ * child;
    }
  }
  phi.swap(out);
}

double CharacteristicSolver::second_coordinate(std::size_t j, std::size_t i) const {
  if (type_ == ModelType::timer) return static_cast<double>(i - j) * dt_;
  return x_[i] - x_[j];
}

std::vector<double> CharacteristicSolver::from_function(const std::function<double(double, double)>& f) const {
  std::vector<double> M(cells());
  for (std::size_t i = 0; i < n(); ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double v = f(second_coordinate(j, i), x_[i]) * w_[j] * w_[i];
      if (type_ == ModelType::timer) v /= kappa_ * x_[j];
      if (v < 0.0) throw ValidationError("two-variable solver: initial density must be nonnegative");
      M[index(j, i)] = v;
    }
  return M;
}

GridDensity CharacteristicSolver::to_density(const std::vector<double>& M) const {
  const std::size_t nn = n();
  std::vector<double> v(nn * nn, 0.0);
  for (std::size_t i = 0; i < nn; ++i)
    for (std::size_t j = 0; j <= i; ++j) v[j * nn + i] = M[index(j, i)] / (w_[j] * w_[i]);
  GridDensity d(x_, x_, std::move(v));
  d.geometric = d.geometric_y = true;
  d.cell_quadrature = true;
  d.refresh_normalization();
  return d;
}

std::vector<double> CharacteristicSolver::marginal_x(const std::vector<double>& M) const {
  std::vector<double> out(n(), 0.0);
  for (std::size_t i = 0; i < n(); ++i)
    for (std::size_t j = 0; j <= i; ++j) out[i] += M[index(j, i)];
  return out;
}

std::vector<double> CharacteristicSolver::marginal_birth(const std::vector<double>& M) const {
  std::vector<double> out(n(), 0.0);
  for (std::size_t i = 0; i < n(); ++i)
    for (std::size_t j = 0; j <= i; ++j) out[j] += M[index(j, i)];
  return out;
}

Trajectory solve_adder_2d(const std::vector<double>& M0, const CharacteristicSolver& solver, double T,
                          std::size_t n_snapshots, double* max_boundary_mismatch) {
  if (M0.size() != solver.cells()) throw ValidationError("solve_adder_2d: initial state has the wrong size");
  std::vector<double> M = M0;
  const std::size_t steps = static_cast<std::size_t>(std::llround(T / solver.dt()));
  Trajectory tr;
  double lost = 0.0, mis = 0.0;
  std::size_t done = 0;
  CharacteristicSolver::StepReport rep;
  for (std::size_t target : snapshot_steps(steps, n_snapshots)) {
    for (; done < target; ++done) {
      solver.step(M, &rep);
      lost += rep.lost;
      mis = std::max(mis, rep.boundary_mismatch);
    }
    tr.times.push_back(static_cast<double>(done) * solver.dt());
    tr.states.push_back(solver.to_density(M));
    tr.lost.push_back(lost);
  }
  if (max_boundary_mismatch) *max_boundary_mismatch = mis;
  return tr;
}

namespace {

std::vector<double> diagonal_start(const CharacteristicSolver& s) {
  std::vector<double> M(s.cells(), 0.0);
  for (std::size_t c = s.n() / 3; c < 2 * s.n() / 3; ++c) M[s.index(c, c)] = 1.0;
  return M;
}

GridDensity density_1d(const std::vector<double>& x, const std::vector<double>& w, const std::vector<double>& counts) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = counts[i] / w[i];
  GridDensity d(x, std::move(v), true);
  d.cell_quadrature = true;
  d.refresh_normalization();
  return d;
}

}  // namespace

SteadyState simulate_to_steady(const RateFunction& B, ModelType type, double kappa, int k, const SolverGrid& grid,
                               std::size_t max_steps, double tol) {
  CharacteristicSolver solver(type, B, kappa, k, grid);
  const std::size_t p = static_cast<std::size_t>(solver.m());
  PowerResult pr = block_power(diagonal_start(solver), p, [&](std::vector<double>& v) { solver.step(v); }, max_steps, tol);
  SteadyState st;
  st.type = type;
  st.steps = pr.steps;
  st.step_change = pr.change;
  st.lambda = std::log(pr.rho) / solver.dt();
  std::vector<double> M = pr.vec;
  double sm = sum(M);
  for (double& v : M) v /= sm;
  // Leakage over one period, relative to the mass, per unit time.
  std::vector<double> probe = M;
  double lost = 0.0;
  CharacteristicSolver::StepReport rep;
  for (std::size_t j = 0; j < p; ++j) {
    solver.step(probe, &rep);
    lost += rep.lost * std::pow(pr.rho, -static_cast<double>(j));
  }
  st.lost_fraction = lost / (static_cast<double>(p) * solver.dt());
  st.stabilized = pr.converged && st.lost_fraction < 1e-6;
  st.cells = M;
  st.joint = solver.to_density(M);
  st.size_marginal = density_1d(solver.x(), solver.widths(), solver.marginal_x(M));
  st.birth_marginal = density_1d(solver.x(), solver.widths(), solver.marginal_birth(M));
  return st;
}

EigenTriplet adder_steady(const RateFunction& B, double kappa, int k, const SolverGrid& grid, std::size_t max_steps,
                          double tol) {
  CharacteristicSolver solver(ModelType::adder, B, kappa, k, grid);
  const std::size_t p = static_cast<std::size_t>(solver.m());
  PowerResult fwd = block_power(diagonal_start(solver), p, [&](std::vector<double>& v) { solver.step(v); }, max_steps, tol);
  if (!fwd.converged) throw NumericalError("adder_steady: no convergence, last change " + std::to_string(fwd.change));
  std::vector<double> ones(solver.cells(), 1.0);
  PowerResult adj = block_power(ones, p, [&](std::vector<double>& v) { solver.adjoint_step(v); }, max_steps, tol);
  if (!adj.converged) throw NumericalError("adder_steady: adjoint did not converge");
  std::vector<double> M = fwd.vec, phi = adj.vec;
  double sm = sum(M);
  for (double& v : M) v /= sm;
  double dot = 0.0;
  for (std::size_t c = 0; c < M.size(); ++c) dot += phi[c] * M[c];
  for (double& v : phi) v /= dot;

  EigenTriplet t;
  t.k = k;
  t.lambda = std::log(fwd.rho) / solver.dt();
  t.oscillatory = true;
  t.iterations = fwd.steps;
  t.N = solver.to_density(M);
  const std::size_t nn = solver.n();
  t.phi.assign(nn * nn, 0.0);
  for (std::size_t i = 0; i < nn; ++i)
    for (std::size_t j = 0; j <= i; ++j) t.phi[j * nn + i] = phi[solver.index(j, i)];
  std::vector<double> SM = M;
  solver.step(SM);
  double res = 0.0;
  for (std::size_t c = 0; c < M.size(); ++c) res += std::abs(SM[c] - fwd.rho * M[c]);
  t.residual = res;
  t.diagnostics["rho"] = fwd.rho;
  t.diagnostics["mass_above_diagonal"] = 0.0;
  return t;
}

// ---------------------------------------------------------------- entropy

namespace {

template <class Step>
EntropyTrace gre_trace(Step&& step, std::vector<double> M, const std::vector<double>& N, const std::vector<double>& phi,
                       double rho, double dt, std::size_t steps, const EntropyFunction& H) {
  auto entropy = [&](const std::vector<double>& u) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i)
      if (N[i] > 0.0 && phi[i] > 0.0) s += phi[i] * N[i] * H(u[i] / N[i]);
    return s;
  };
  EntropyTrace tr;
  tr.times.push_back(0.0);
  tr.values.push_back(entropy(M));
  for (std::size_t s = 1; s <= steps; ++s) {
    step(M);
    for (double& v : M) v /= rho;
    double h = entropy(M);
    tr.dissipation.push_back(-(h - tr.values.back()) / dt);
    tr.max_increase = std::max(tr.max_increase, h - tr.values.back());
    tr.times.push_back(static_cast<double>(s) * dt);
    tr.values.push_back(h);
  }
  return tr;
}

}  // namespace

EntropyTrace gre_renewal(const RenewalSolver& solver, std::vector<double> M0, double T, const EntropyFunction& H) {
  EigenTriplet t = solver.discrete_triplet();
  std::vector<double> N(t.N.values.size());
  for (std::size_t i = 0; i < N.size(); ++i) N[i] = t.N.values[i] * solver.dt();
  const std::size_t steps = static_cast<std::size_t>(std::llround(T / solver.dt()));
  return gre_trace([&](std::vector<double>& v) { solver.step(v); }, std::move(M0), N, t.phi,
                   std::exp(t.lambda * solver.dt()), solver.dt(), steps, H);
}

EntropyTrace gre_growth_frag(const GrowthFragOperator& op, std::vector<double> M0, double T, const EntropyFunction& H) {
  EigenTriplet t = gf_eigen(op);
  std::vector<double> N(op.size());
  for (std::size_t i = 0; i < N.size(); ++i) N[i] = t.N.values[i] * op.widths()[i];
  const std::size_t steps = static_cast<std::size_t>(std::llround(T / op.dt()));
  return gre_trace([&](std::vector<double>& v) { op.step(v); }, std::move(M0), N, t.phi,
                   std::exp(t.lambda * op.dt()), op.dt(), steps, H);
}

}  // namespace divrate
