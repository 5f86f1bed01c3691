#pragma once

#include <complex>
#include <vector>

#include "divrate/core.hpp"

namespace divrate {

enum class DilationBranch { H0, Hinf, glued };

//! Right-hand side L of 2k f(2x) - f(x) = L on a geometric grid with ratio 2^{1/m}.
struct DilationProblem {
  GridDensity L;
  int k = 1;
  DilationBranch branch = DilationBranch::H0;
  double x_bar = 0.0;  //!< gluing point; 0 picks the point of equal truncation error
};

struct DilationReport {
  std::size_t terms = 0;
  double x_bar = 0.0;
  double branch_discrepancy = 0.0;  //!< max |H0 - Hinf| on [x_bar/2, 2 x_bar] (glued only)
};

//! Points per octave of a geometric grid; throws unless 2x is an index shift.
int octave_points(const std::vector<double>& x);

//! 2k f(2x) - f(x); f vanishes beyond the top of the grid.
GridDensity dilation_apply(const GridDensity& f, int k);

//! Geometric-series solution. Below the grid L is extended by its first value (summed in closed form),
//! above the grid by zero.
GridDensity dilation_solve(const DilationProblem& p, DilationReport* report = nullptr);

struct MellinOptions {
  std::size_t n = 1u << 14;
  double u_min = -12.0;
  double u_max = 12.0;
  double floor = 1e-8;
};

//! Values of the Mellin transform on the line Re s = (q+1)/2: s_j = sigma + i omega_j.
struct MellinLine {
  double sigma = 0.0;
  std::vector<double> omega;
  std::vector<std::complex<double>> values;
};

//! Mellin transform by the substitution x = e^u and an FFT on a uniform u grid.
MellinLine mellin_line(const GridDensity& f, double q, const MellinOptions& opt = {});

//! Solves k * int f(x/z) b0(dz)/z - f(x) = L through the Mellin transform along Re s = (q+1)/2.
//! Returns the solution on L's grid; flagged frequencies (denominator below the floor) are zeroed.
//! The log window [u_min, u_max] is widened to cover L's grid.
GridDensity mellin_dilation_solve(const GridDensity& L, const FragmentationKernel& b0, int k, double q,
                                  const MellinOptions& opt = {}, std::size_t* flagged = nullptr);

struct FourierDeconvolution {
  std::vector<double> values;  //!< at offsets j*dx, circular (indices past n/2 are negative offsets)
  double imag_residual = 0.0;  //!< max |imaginary part| relative to max |real part|
  std::size_t retained = 0;
  std::size_t floor_hits = 0;
};

//! w with numerator = denominator * w (continuous convolution on a common uniform grid of spacing dx).
//! Frequencies with |omega| > cutoff are dropped; retained ones with |denominator| below
//! floor * max |denominator| are zeroed.
FourierDeconvolution fourier_deconvolve(const std::vector<double>& numerator, const std::vector<double>& denominator,
                                        double dx, double cutoff, double floor = 1e-6);

}  // namespace divrate
