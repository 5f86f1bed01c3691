#include "divrate/numerics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include "divrate/core.hpp"

namespace divrate::num {

std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> v(n);
  if (n == 1) {
    v[0] = a;
    return v;
  }
  for (std::size_t i = 0; i < n; ++i) v[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return s;
}

std::vector<double> cumulative_trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> c(x.size(), 0.0);
  for (std::size_t i = 1; i < x.size(); ++i) c[i] = c[i - 1] + 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return c;
}

std::vector<double> tail_trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> c(x.size(), 0.0);
  for (std::size_t i = x.size(); i-- > 1;) c[i - 1] = c[i] + 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return c;
}

double interp(const std::vector<double>& x, const std::vector<double>& y, double t, double outside) {
  if (x.empty() || t < x.front() || t > x.back()) return outside;
  if (x.size() == 1) return y[0];
  auto it = std::upper_bound(x.begin(), x.end(), t);
  std::size_t i = static_cast<std::size_t>(it - x.begin());
  if (i == x.size()) return y.back();
  if (i == 0) return y.front();
  double w = (t - x[i - 1]) / (x[i] - x[i - 1]);
  return y[i - 1] + w * (y[i] - y[i - 1]);
}

double interp_clamped(const std::vector<double>& x, const std::vector<double>& y, double t) {
  if (t <= x.front()) return y.front();
  if (t >= x.back()) return y.back();
  return interp(x, y, t);
}

std::vector<double> resample(const std::vector<double>& x, const std::vector<double>& y,
                             const std::vector<double>& to, double outside) {
  std::vector<double> r(to.size());
  for (std::size_t i = 0; i < to.size(); ++i) r[i] = interp(x, y, to[i], outside);
  return r;
}

double integrate(const std::function<double(double)>& f, double a, double b, double rel_tol) {
  if (b <= a) return 0.0;
  double err = 0.0;
  double v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, 20, rel_tol, &err);
  if (!std::isfinite(v)) throw NumericalError("quadrature failure: non-finite integral");
  return v;
}

double integrate_to_infinity(const std::function<double(double)>& f, double a, double rel_tol) {
  // Integrate on doubling panels until the panel contribution is negligible.
  double total = 0.0, lo = a, width = 1.0;
  for (int panel = 0; panel < 200; ++panel) {
    double part = integrate(f, lo, lo + width, rel_tol);
    total += part;
    lo += width;
    if (std::abs(part) <= 1e-17 * std::max(1.0, std::abs(total)) && panel > 2) return total;
    width *= 1.5;
  }
  throw NumericalError("quadrature failure: integrand does not decay");
}

double find_root(const std::function<double(double)>& f, double lo, double hi, double tol) {
  double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0) == (fhi > 0)) throw NumericalError("root not bracketed");
  std::uintmax_t iters = 200;
  auto stop = [tol](double a, double b) { return std::abs(b - a) <= tol * std::max(1.0, std::abs(a)); };
  auto r = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, stop, iters);
  return 0.5 * (r.first + r.second);
}

namespace {
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

cvec run_fft(const cvec& in, int sign) {
  const int n = static_cast<int>(in.size());
  cvec out(in.size());
  if (n == 0) return out;
  cvec buf = in;
  fftw_plan p;
  {
    std::lock_guard<std::mutex> lock(plan_mutex());
    p = fftw_plan_dft_1d(n, reinterpret_cast<fftw_complex*>(buf.data()),
                         reinterpret_cast<fftw_complex*>(out.data()), sign, FFTW_ESTIMATE);
  }
  fftw_execute(p);
  {
    std::lock_guard<std::mutex> lock(plan_mutex());
    fftw_destroy_plan(p);
  }
  return out;
}
}  // namespace

cvec fft(const cvec& in) { return run_fft(in, FFTW_FORWARD); }

cvec ifft(const cvec& in) {
  cvec out = run_fft(in, FFTW_BACKWARD);
  const double s = 1.0 / static_cast<double>(in.size());
  for (auto& v : out) v *= s;
  return out;
}

double fft_frequency(std::size_t j, std::size_t n, double dx) {
  double jj = (j <= n / 2) ? static_cast<double>(j) : static_cast<double>(j) - static_cast<double>(n);
  return 2.0 * M_PI * jj / (static_cast<double>(n) * dx);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v), s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw ValidationError("quantile of empty sample");
  std::sort(v.begin(), v.end());
  double pos = p * static_cast<double>(v.size() - 1);
  std::size_t i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= v.size()) return v.back();
  double w = pos - static_cast<double>(i);
  return v[i] * (1 - w) + v[i + 1] * w;
}

double ks_distance(std::vector<double> sample, const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    double F = cdf(sample[i]);
    d = std::max(d, std::max(std::abs(F - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - F)));
  }
  return d;
}

}  // namespace divrate::num
