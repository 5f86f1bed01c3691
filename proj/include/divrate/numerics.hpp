#pragma once

#include <complex>
#include <functional>
#include <vector>

namespace divrate::num {

std::vector<double> linspace(double a, double b, std::size_t n);

double trapezoid(const std::vector<double>& x, const std::vector<double>& y);
//! Running integral from the first point.
std::vector<double> cumulative_trapezoid(const std::vector<double>& x, const std::vector<double>& y);
//! Integral from each point to the last point, accumulated from the end inward.
std::vector<double> tail_trapezoid(const std::vector<double>& x, const std::vector<double>& y);

//! Linear interpolation; `outside` is returned beyond the grid.
double interp(const std::vector<double>& x, const std::vector<double>& y, double t, double outside = 0.0);
//! Linear interpolation with constant extrapolation.
double interp_clamped(const std::vector<double>& x, const std::vector<double>& y, double t);
std::vector<double> resample(const std::vector<double>& x, const std::vector<double>& y,
                             const std::vector<double>& to, double outside = 0.0);

//! Adaptive Gauss-Kronrod quadrature on a finite interval.
double integrate(const std::function<double(double)>& f, double a, double b, double rel_tol = 1e-12);
//! Integral over [a, inf) of a function decaying at infinity.
double integrate_to_infinity(const std::function<double(double)>& f, double a, double rel_tol = 1e-12);

//! Root of a monotone function on a bracket.
double find_root(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-13);

using cvec = std::vector<std::complex<double>>;
//! Forward DFT, sum x_j exp(-2 pi i jk/n).
cvec fft(const cvec& in);
//! Inverse DFT including the 1/n factor.
cvec ifft(const cvec& in);

//! Angular frequency of DFT index j for n points with spacing dx.
double fft_frequency(std::size_t j, std::size_t n, double dx);

double mean(const std::vector<double>& v);
double variance(const std::vector<double>& v);
double pearson(const std::vector<double>& a, const std::vector<double>& b);
double quantile(std::vector<double> v, double p);

//! Kolmogorov-Smirnov distance between a sample and a CDF.
double ks_distance(std::vector<double> sample, const std::function<double(double)>& cdf);

}  // namespace divrate::num
