#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "divrate/core.hpp"

namespace divrate {

//! f / int_a^inf f, accumulated from the top of the grid inward. Points where the tail mass falls below
//! `floor` (relative to the total) are set to zero and flagged.
EstimationResult hazard_from_density(const GridDensity& f, double floor = 1e-8);

// ---------------------------------------------------------------- age

//! Kernel hazard estimator sum K_h(a - zeta) / #{zeta >= a}, 0 where no lifetime reaches a.
//! A lower bound enables the local-linear boundary kernel (lifetimes live on the half-line).
EstimationResult estimate_B_age_genealogical(const std::vector<double>& lifetimes, const KernelSpec& K, double h,
                                             const std::vector<double>& grid = {},
                                             std::optional<double> lower_bound = 0.0);

//! Population lifetimes with the selection bias removed by e^{lambda a} weights (self-normalized).
//! h <= 0 selects exp(-lambda T / (2s + 1)).
EstimationResult estimate_B_age_population(const std::vector<double>& lifetimes, double T, double lambda,
                                           const KernelSpec& K, double s = 2.0, double h = 0.0,
                                           const std::vector<double>& grid = {});

//! H(x) = f2(x) / (1 - int_0^x f2).
RateFunction compute_biased_hazard(const GridDensity& f2, double floor = 1e-12);

struct LambdaEstimate {
  double lambda = 0.0;
  double doubling_time = 0.0;
  double intercept = 0.0;
  std::size_t points = 0;
};

//! Least-squares slope of ln(count) against time, each point weighted by its count.
LambdaEstimate estimate_lambda(const std::vector<std::pair<double, double>>& counts);
//! Count series of a U2 sample on n_times evenly spaced times in [t0, t1].
LambdaEstimate estimate_lambda(const SampleSet& u2, double t0, double t1, std::size_t n_times = 25);

//! B = max(0, -lambda - N'/N) from a sample of ages at a fixed time; zero and flagged where N < varpi max N.
EstimationResult estimate_B_age_pointdata(const std::vector<double>& ages, double lambda, const KernelSpec& K,
                                          double h, double varpi = 0.0, const std::vector<double>& grid = {});
//! Same from a (possibly noisy) density on a uniform grid; h > 0 smooths it first.
EstimationResult estimate_B_age_pointdata(const GridDensity& N, double lambda, const KernelSpec& K, double h,
                                          double varpi = 1e-6);

// ---------------------------------------------------------------- size

//! Division and birth size densities give B(x) = f_d / int_x^inf (f_d - k f_b) e^{lambda int_x^y ds/tau} dy.
//! Both densities are evaluated on f_div's grid.
EstimationResult estimate_B_size_dynamics(const GridDensity& f_div, const GridDensity& f_birth, int k, double lambda,
                                          const GrowthLaw& tau, double varpi = 1e-8);
EstimationResult estimate_B_size_dynamics(const std::vector<double>& division_sizes,
                                          const std::vector<double>& birth_sizes, int k, double lambda,
                                          const GrowthLaw& tau, const KernelSpec& K, double h,
                                          const std::vector<double>& grid = {});

//! Birth-size chain estimator 1/2 nu_h(y/2) / max(P_n(xi_parent <= y, xi >= y/2), varpi).
//! parent[i] and child[i] are consecutive birth sizes. varpi <= 0 selects 1/n.
EstimationResult estimate_B_size_genealogical(const std::vector<double>& parent, const std::vector<double>& child,
                                              const KernelSpec& K, double h, double varpi = 0.0,
                                              const std::vector<double>& grid = {});
//! Consecutive pairs of a U1 chain.
EstimationResult estimate_B_size_genealogical(const SampleSet& chain, const KernelSpec& K, double h,
                                              double varpi = 0.0, const std::vector<double>& grid = {});

struct SizePointOptions {
  GrowthLaw tau = GrowthLaw::exponential(1.0);
  double lambda = 1.0;
  FragmentationKernel b0 = FragmentationKernel::mitosis();
  int k = 2;
  double varpi = 1e-3;  //!< floor on tau N relative to its maximum
  double x_bar = 0.0;   //!< gluing point of the dilation branches; 0 chooses it
  int points_per_octave = 64;
  double mellin_q = 0.0;  //!< weight exponent of the Mellin inversion (non-mitosis kernels)
};

//! B = G_k^{-1}(d/dx(tau N) + lambda N) / (tau N) from sizes at a fixed time.
EstimationResult estimate_B_size_pointdata(const std::vector<double>& sizes, const SizePointOptions& opt,
                                           const KernelSpec& K, double h);
//! Same from a density on a geometric grid with ratio 2^{1/m}.
EstimationResult estimate_B_size_pointdata(const GridDensity& N, const SizePointOptions& opt);

// ---------------------------------------------------------------- increment

//! Increments of a genealogical chain form a renewal sequence: the age estimator applies unchanged.
//! With birth sizes supplied, diagnostics["corr_birth_increment"] reports their correlation.
EstimationResult estimate_B_increment_genealogical(const std::vector<double>& increments, const KernelSpec& K,
                                                   double h, const std::vector<double>& birth_sizes = {},
                                                   const std::vector<double>& grid = {});

//! Population increments weighted by the size at division.
EstimationResult estimate_B_increment_population(const std::vector<double>& increments,
                                                 const std::vector<double>& division_sizes, const KernelSpec& K,
                                                 double h, const std::vector<double>& grid = {});

struct MarginalDeconvolutionOptions {
  double kappa = 1.0;
  int k = 2;
  //! 1/h'; 0 picks the first frequency where the denominator transform falls below 10x its noise floor
  //! (half-sample disagreement for samples, upper-half median modulus for grid input).
  double cutoff = 0.0;
  double floor = 1e-6;    //!< relative modulus floor of the denominator transform
  int points_per_octave = 64;
  std::size_t n_uniform = 1u << 14;
  double z_max = 0.0;     //!< output range; 0 uses the largest size
};

//! Increment rate from the size marginal: dilation solve for H1, then f = F^{-1}(F[H1] / F[2 H1(2.)]).
EstimationResult estimate_B_increment_from_size_marginal(const std::vector<double>& sizes, const KernelSpec& K,
                                                         double h, const MarginalDeconvolutionOptions& opt = {});
//! Same from the marginal density on a geometric grid.
EstimationResult estimate_B_increment_from_size_marginal(const GridDensity& Nx,
                                                         const MarginalDeconvolutionOptions& opt = {});

//! H1 on Nx's grid (diagnostic): solution of 2 H1(2x) - H1(x) = d/dx(kappa x^k Nx).
GridDensity dilation_source(const GridDensity& Nx, double kappa, int k);

// ---------------------------------------------------------------- smoothing and bandwidths

//! Discrete convolution K_h * f on f's grid; column-normalized so the trapezoid integral is preserved.
GridDensity regularize_noisy_density(const GridDensity& f, const KernelSpec& K, double h);
//! Kernel density of a sample on a grid.
GridDensity regularize_noisy_density(const std::vector<double>& sample, const KernelSpec& K, double h,
                                     const std::vector<double>& grid);

enum class BandwidthMethod { rule_of_thumb, cross_validation, comparison };

//! Rule of thumb sigma n^{-1/(2 order + 1)}; cross-validation and comparison of estimates search the dyadic
//! grid h_rot 2^j, j = -4..3. A lower bound enables the boundary kernel in the fitted densities.
double select_bandwidth(const std::vector<double>& sample, const KernelSpec& K, BandwidthMethod method,
                        std::optional<double> lower_bound = std::nullopt, int folds = 5);

}  // namespace divrate
