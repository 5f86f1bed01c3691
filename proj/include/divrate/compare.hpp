#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "divrate/core.hpp"
#include "divrate/solver.hpp"

namespace divrate {

//! `requested` if positive, else the hardware concurrency; DIVRATE_WORKERS caps either.
unsigned worker_count(unsigned requested = 0);
//! Runs fn(0..n-1) on up to `workers` threads; the first failing index's exception is rethrown.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------- calibration

struct CalibrationOptions {
  KernelSpec K = KernelSpec::biweight();
  double h = 0.0;  //!< 0 uses the rule of thumb on the trigger sample
  std::optional<double> kappa;   //!< growth rate; estimated from sizes and lifetimes when absent
  std::optional<double> lambda;  //!< Malthus parameter for population and snapshot data
  double tail_quantile = 0.995;  //!< the fitted table stops at this quantile of the trigger sample
  std::size_t grid_points = 256;
};

struct CalibratedModel {
  ModelType type = ModelType::adder;
  RateFunction rate;
  EstimationResult fit;
  double kappa = 1.0;
  int k = 1;  //!< 1 for genealogical data, 2 for population and snapshot data
  std::string estimator;
};

//! Fits the model's division rate with the estimator matching the data's scheme.
CalibratedModel calibrate(const SampleSet& data, ModelType type, const CalibrationOptions& opt = {});

//! Median of ln(size_division / size_birth) / lifetime over divided cells.
double estimate_growth_rate(const SampleSet& data);

// ---------------------------------------------------------------- distances

enum class Metric { wasserstein1, l2_regularized };
std::string metric_name(Metric m);
Metric metric_from_name(const std::string& s);

struct DistanceSpec {
  Metric metric = Metric::wasserstein1;
  KernelSpec K = KernelSpec::biweight();
  double h = 0.05;          //!< smoothing bandwidth of the L2 metric
  std::size_t n_grid = 2048;  //!< common grid of the L2 metric (per axis)
};

//! Both inputs are normalized to unit mass. W1 is 1D only.
double distance(const GridDensity& d1, const GridDensity& d2, const DistanceSpec& spec = {});
//! Exact W1 between two empirical distributions.
double wasserstein1(std::vector<double> a, std::vector<double> b);

// ---------------------------------------------------------------- correlations

//! Pearson coefficients in the order AD/SB, AD/SD, AD/ID, SB/SD, SB/ID, SD/ID
//! (age at division, size at birth, size at division, increment at division).
struct CorrelationRow {
  std::array<double, 6> value{};
  std::array<bool, 6> defined{};
  static const std::array<std::string, 6>& labels();
};

CorrelationRow correlation_table(const SampleSet& data);
//! Mean absolute difference over the entries defined in both rows (NaN if none).
double row_deviation(const CorrelationRow& a, const CorrelationRow& b);

// ---------------------------------------------------------------- marginals

//! Lag-`lag` correlation of log birth sizes along ancestry; near 1 when sizes drift without bound.
double lineage_autocorrelation(const SampleSet& data, std::size_t lag = 8);

//! Time-weighted densities of size, increment since birth and age seen by the observation scheme: time spent
//! along the followed lineage (U1), or e^{-lambda t}-weighted over the tree up to T minus the largest lifetime
//! (U2). Exact bin integrals of the exponential growth trajectories; snapshot data (VT) gives histograms.
struct MarginalSet {
  GridDensity size;       //!< geometric bins
  GridDensity increment;  //!< uniform bins from 0
  GridDensity age;        //!< uniform bins from 0
  std::array<double, 3> scale{1.0, 1.0, 1.0};  //!< standard deviations (size, increment, age)
  static const std::array<std::string, 3>& labels();
};

MarginalSet data_marginals(const SampleSet& data, double lambda = 0.0, int points_per_octave = 32,
                           std::size_t bins = 256);
GridDensity data_size_marginal(const SampleSet& data, double lambda = 0.0, int points_per_octave = 32);

//! Marginals of a two-variable steady state, binned like `bins` (increment and age).
MarginalSet steady_marginals(const SteadyState& st, double kappa, const MarginalSet& bins);

//! Per-coordinate distances after dividing each coordinate by the reference scale.
std::array<double, 3> marginal_distances(const MarginalSet& data, const MarginalSet& model, const DistanceSpec& spec);

struct Variability {
  double growth_cv = 0.0;  //!< coefficient of variation of individual growth rates
  double septum_cv = 0.0;  //!< coefficient of variation of the daughter/mother size ratio (beta kernel)
  bool active() const { return growth_cv > 0.0 || septum_cv > 0.0; }
};

//! Symmetric beta kernel on (0, 1) with the given coefficient of variation around 1/2.
FragmentationKernel beta_septum_kernel(double cv, std::size_t n = 401);

//! Simulation model of a calibrated fit.
ModelSpec model_spec(const CalibratedModel& m, const Variability& v = {});

// ---------------------------------------------------------------- comparison

struct CompareOptions {
  DistanceSpec metric;
  CalibrationOptions calibration;
  Variability variability;
  int points_per_octave = 32;       //!< steady-state solver grid
  std::size_t max_steps = 100000;
  double steady_tol = 1e-8;
  std::size_t n_model_chain = 0;    //!< genealogy length for model correlation rows; 0 uses max(records, 10^4)
  std::size_t n_monte_carlo = 200000;  //!< cells per Monte Carlo marginal (variability on)
  double stationarity_threshold = 0.5;
  std::uint64_t seed = 1;
  unsigned workers = 0;
};

//! Steady state of the two-variable solver on a grid spanning the data sizes.
SteadyState model_steady_state(const CalibratedModel& m, const SampleSet& data, const CompareOptions& opt);
//! Model marginals: from the steady state, or from a Monte Carlo genealogy (population for k = 2) when
//! variability is on. `steady` receives the solver output when it is used.
MarginalSet model_marginals(const CalibratedModel& m, const SampleSet& data, const MarginalSet& bins,
                            const CompareOptions& opt, SteadyState* steady = nullptr);

struct ModelReport {
  CalibratedModel model;
  SteadyState steady;
  MarginalSet marginals;
  bool degenerate = false;  //!< no steady size profile
  std::string note;
  //! Mean of the scale-free distances over the size, increment and age marginals.
  double distance = std::numeric_limits<double>::infinity();
  std::array<double, 3> marginal_distance{};
  CorrelationRow row;
  double correlation_deviation = std::numeric_limits<double>::quiet_NaN();
};

struct ComparisonReport {
  Scheme scheme = Scheme::U1;
  DistanceSpec metric;
  Variability variability;
  double lambda = 0.0;
  double autocorrelation = 0.0;
  //! False when the data's own sizes drift: no steady profile can match them and ranking uses the
  //! correlation-row deviation alone.
  bool data_stationary = true;
  MarginalSet data_marginals;
  CorrelationRow data_row;
  std::vector<ModelReport> models;  //!< in declaration order
  std::vector<std::size_t> ranking;
  std::string ranking_basis;
};

//! Calibrates, solves and scores each candidate; sorts by distance, then by correlation deviation, then by
//! declaration order. Degenerate candidates rank last. Each calibrated model reproduces the marginal of its own
//! trigger variable by construction, so the distance pools all three marginals.
ComparisonReport rank_models(const SampleSet& data, const std::vector<ModelType>& candidates,
                             const CompareOptions& opt = {});

}  // namespace divrate
