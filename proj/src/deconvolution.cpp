#include "divrate/deconvolution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "divrate/numerics.hpp"

namespace divrate {

namespace {

double weighted_norm(const std::vector<double>& v, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * v[i] * w[i];
  return std::sqrt(s);
}

void require_1d(const GridDensity& f, const char* what) {
  if (f.dim() != 1) throw ValidationError(std::string(what) + ": one-dimensional input required");
  if (f.size() < 2) throw ValidationError(std::string(what) + ": grid too small");
}

constexpr std::size_t kMaxTerms = 200;
constexpr double kTermTol = 1e-12;

// Partial sums of sum_j c^j L(2^{sign j} x) starting at j = j0.
std::vector<double> series(const std::vector<double>& L, const std::vector<double>& w, int m, double c, int sign,
                           int j0, std::size_t* terms) {
  const std::size_t n = L.size();
  std::vector<double> H(n, 0.0), inc(n);
  const double scale = std::max(weighted_norm(L, w), std::numeric_limits<double>::min());
  double prev = std::numeric_limits<double>::infinity();
  int growing = 0;
  std::size_t used = 0;
  for (std::size_t j = static_cast<std::size_t>(j0); j < kMaxTerms; ++j) {
    const double cj = std::pow(c, static_cast<double>(j));
    const long shift = static_cast<long>(j) * m * sign;
    for (std::size_t i = 0; i < n; ++i) {
      long src = static_cast<long>(i) + shift;
      double v;
      if (src < 0) v = L.front();
      else if (src >= static_cast<long>(n)) v = 0.0;
      else v = L[static_cast<std::size_t>(src)];
      inc[i] = cj * v;
    }
    for (std::size_t i = 0; i < n; ++i) H[i] += inc[i];
    ++used;
    double norm = weighted_norm(inc, w);
    if (norm < kTermTol * scale) break;
    growing = norm >= prev ? growing + 1 : 0;
    if (growing >= 10) throw NumericalError("dilation_solve: series terms are not decaying");
    prev = norm;
  }
  if (terms) *terms = std::max(*terms, used);
  return H;
}

}  // namespace

int octave_points(const std::vector<double>& x) {
  if (x.size() < 2 || !(x[0] > 0.0)) throw ValidationError("dilation: geometric grid with positive points required");
  const double r = x[1] / x[0];
  const double mf = std::log(2.0) / std::log(r);
  const int m = static_cast<int>(std::lround(mf));
  if (m < 1 || std::abs(mf - m) > 1e-6) throw ValidationError("dilation: grid ratio must be 2^{1/m}");
  for (std::size_t i = 1; i < x.size(); ++i)
    if (std::abs(x[i] / x[i - 1] - r) > 1e-9 * r) throw ValidationError("dilation: grid is not geometric");
  return m;
}

GridDensity dilation_apply(const GridDensity& f, int k) {
  require_1d(f, "dilation_apply");
  if (k < 1) throw ValidationError("dilation_apply: k must be positive");
  const int m = octave_points(f.x);
  const std::size_t n = f.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double up = i + m < n ? f.values[i + m] : 0.0;
    out[i] = 2.0 * k * up - f.values[i];
  }
  GridDensity g(f.x, std::move(out), true);
  g.refresh_normalization();
  return g;
}

GridDensity dilation_solve(const DilationProblem& p, DilationReport* report) {
  require_1d(p.L, "dilation_solve");
  if (p.k < 1) throw ValidationError("dilation_solve: k must be positive");
  const int m = octave_points(p.L.x);
  const std::size_t n = p.L.size();
  const double c = 2.0 * p.k;
  const std::vector<double> widths = GridDensity(p.L.x, p.L.values, true).cell_widths();
  // Increments are measured in L2(x^q) on either side of the pivot q = 2k - 1.
  auto weights = [&](double q) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = widths[i] * std::pow(p.L.x[i], q);
    return w;
  };
  DilationReport rep;

  std::vector<double> H0, Hinf;
  if (p.branch != DilationBranch::Hinf) H0 = series(p.L.values, weights(2.0 * p.k - 2.0), m, 1.0 / c, -1, 1, &rep.terms);
  if (p.branch != DilationBranch::H0) {
    Hinf = series(p.L.values, weights(2.0 * p.k), m, c, +1, 0, &rep.terms);
    for (double& v : Hinf) v = -v;
  }

  std::vector<double> out;
  if (p.branch == DilationBranch::H0) {
    out = std::move(H0);
  } else if (p.branch == DilationBranch::Hinf) {
    out = std::move(Hinf);
  } else {
    double xb = p.x_bar;
    if (!(xb > 0.0)) {
      // Estimated error of each branch: truncation at its open end plus rounding of its absolute series.
      std::vector<double> absL(n);
      for (std::size_t i = 0; i < n; ++i) absL[i] = std::abs(p.L.values[i]);
      std::vector<double> a0 = series(absL, weights(2.0 * p.k - 2.0), m, 1.0 / c, -1, 1, nullptr);
      std::vector<double> ainf = series(absL, weights(2.0 * p.k), m, c, +1, 0, nullptr);
      const double eps = std::numeric_limits<double>::epsilon();
      const double tiny = std::numeric_limits<double>::min();
      std::vector<double> err(n);
      for (std::size_t i = 0; i < n; ++i) {
        double oct_lo = static_cast<double>(i) / m, oct_hi = static_cast<double>(n - 1 - i) / m;
        double ref = std::max(a0[i], tiny);
        double e0 = (absL.front() * std::pow(c, -oct_lo) + eps * a0[i]) / ref;
        double einf = (absL.back() * std::pow(c, oct_hi) + eps * ainf[i]) / ref;
        err[i] = std::max(e0, einf);
      }
      const double emin = *std::min_element(err.begin(), err.end());
      // Near-ties go to the point closest to the middle of the grid.
      std::size_t best = 0;
      long best_d = std::numeric_limits<long>::max();
      for (std::size_t i = 0; i < n; ++i) {
        long d = std::labs(static_cast<long>(i) - static_cast<long>(n / 2));
        if (err[i] <= 2.0 * emin && d < best_d) {
          best_d = d;
          best = i;
        }
      }
      xb = p.L.x[best];
    }
    rep.x_bar = xb;
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = p.L.x[i] < xb ? H0[i] : Hinf[i];
      if (p.L.x[i] >= 0.5 * xb && p.L.x[i] <= 2.0 * xb)
        rep.branch_discrepancy = std::max(rep.branch_discrepancy, std::abs(H0[i] - Hinf[i]));
    }
  }
  if (report) *report = rep;
  GridDensity g(p.L.x, std::move(out), true);
  g.refresh_normalization();
  return g;
}

namespace {

struct LogGrid {
  std::vector<double> u;
  double du;
};

LogGrid log_grid(const MellinOptions& opt) {
  if (opt.n < 8 || !(opt.u_max > opt.u_min)) throw ValidationError("mellin: invalid log grid");
  LogGrid g;
  g.du = (opt.u_max - opt.u_min) / static_cast<double>(opt.n);
  g.u.resize(opt.n);
  for (std::size_t j = 0; j < opt.n; ++j) g.u[j] = opt.u_min + static_cast<double>(j) * g.du;
  return g;
}

}  // namespace

MellinLine mellin_line(const GridDensity& f, double q, const MellinOptions& opt) {
  require_1d(f, "mellin_line");
  LogGrid g = log_grid(opt);
  MellinLine out;
  out.sigma = 0.5 * (q + 1.0);
  num::cvec in(opt.n);
  for (std::size_t j = 0; j < opt.n; ++j) in[j] = std::exp(out.sigma * g.u[j]) * f.at(std::exp(g.u[j]));
  num::cvec F = num::fft(in);
  out.omega.resize(opt.n);
  out.values.resize(opt.n);
  for (std::size_t j = 0; j < opt.n; ++j) {
    // DFT index j evaluates int g(u) e^{-i w u} du, i.e. the transform at s = sigma - i w.
    double w = num::fft_frequency(j, opt.n, g.du);
    out.omega[j] = -w;
    out.values[j] = g.du * std::exp(std::complex<double>(0.0, -w * opt.u_min)) * F[j];
  }
  return out;
}

GridDensity mellin_dilation_solve(const GridDensity& L, const FragmentationKernel& b0, int k, double q,
                                  const MellinOptions& opt, std::size_t* flagged) {
  require_1d(L, "mellin_dilation_solve");
  if (k < 1) throw ValidationError("mellin_dilation_solve: k must be positive");
  const double sigma = 0.5 * (q + 1.0);
  // For self-similar kernels of mean 1/2 the denominator k M[b0](s) - 1 vanishes at s = k.
  if (std::abs(q + 1.0 - 2.0 * k) < 1e-6)
    throw ValidationError("mellin_dilation_solve: integration line hits the zero at s = k; shift q");
  // The window always spans the data grid; cutting L off inside it leaves a jump that the FFT wraps around.
  MellinOptions win = opt;
  if (L.x.front() > 0.0) win.u_min = std::min(win.u_min, std::log(L.x.front()));
  win.u_max = std::max(win.u_max, std::log(L.x.back()));
  LogGrid g = log_grid(win);
  num::cvec in(opt.n);
  for (std::size_t j = 0; j < opt.n; ++j) in[j] = std::exp(sigma * g.u[j]) * L.at(std::exp(g.u[j]));
  num::cvec F = num::fft(in);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < opt.n; ++j) {
    double w = num::fft_frequency(j, opt.n, g.du);
    std::complex<double> D = static_cast<double>(k) * b0.mellin({sigma, -w}) - 1.0;
    if (std::abs(D) < opt.floor) {
      F[j] = 0.0;
      ++hits;
    } else {
      F[j] /= D;
    }
  }
  num::cvec h = num::ifft(F);
  std::vector<double> hu(opt.n);
  for (std::size_t j = 0; j < opt.n; ++j) hu[j] = std::exp(-sigma * g.u[j]) * h[j].real();
  std::vector<double> out(L.size(), 0.0);
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (!(L.x[i] > 0.0)) continue;
    out[i] = num::interp(g.u, hu, std::log(L.x[i]), 0.0);
  }
  if (flagged) *flagged = hits;
  GridDensity res(L.x, std::move(out), L.geometric);
  res.refresh_normalization();
  return res;
}

FourierDeconvolution fourier_deconvolve(const std::vector<double>& numerator, const std::vector<double>& denominator,
                                        double dx, double cutoff, double floor) {
  const std::size_t n = numerator.size();
  if (n < 2 || denominator.size() != n) throw ValidationError("fourier_deconvolve: grids must match");
  if (!(dx > 0.0) || !(cutoff > 0.0)) throw ValidationError("fourier_deconvolve: dx and cutoff must be positive");
  num::cvec a(numerator.begin(), numerator.end()), b(denominator.begin(), denominator.end());
  num::cvec A = num::fft(a), Bf = num::fft(b);
  double bmax = 0.0;
  for (const auto& v : Bf) bmax = std::max(bmax, std::abs(v));
  if (!(bmax > 0.0)) throw NumericalError("fourier_deconvolve: denominator vanishes identically");
  FourierDeconvolution out;
  num::cvec R(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (std::abs(num::fft_frequency(j, n, dx)) > cutoff) continue;
    ++out.retained;
    if (std::abs(Bf[j]) < floor * bmax) {
      ++out.floor_hits;
      continue;
    }
    R[j] = A[j] / Bf[j];
  }
  if (out.retained == 0 || 2 * out.floor_hits > out.retained)
    throw NumericalError("fourier_deconvolve: denominator below the floor on most retained frequencies");
  num::cvec r = num::ifft(R);
  out.values.resize(n);
  double re = 0.0, im = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = r[j].real() / dx;
    re = std::max(re, std::abs(r[j].real()));
    im = std::max(im, std::abs(r[j].imag()));
  }
  out.imag_residual = re > 0.0 ? im / re : 0.0;
  return out;
}

}  // namespace divrate
