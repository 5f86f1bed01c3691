#pragma once

#include <complex>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace divrate {

//! Input or configuration problem (CLI exit code 1).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! Numerical failure such as non-convergence (CLI exit code 2).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TailPolicy { constant_last, power_law, zero_before_support };

//! Nonnegative division rate on a half-line, per unit of the trigger variable.
class RateFunction {
 public:
  enum class Form { tabulated, constant, power, step };

  RateFunction() : RateFunction(constant(1.0)) {}
  RateFunction(std::vector<double> grid, std::vector<double> values,
               TailPolicy tail = TailPolicy::constant_last, double tail_exponent = 0.0);

  static RateFunction constant(double b);
  //! c * x^gamma, gamma > -1.
  static RateFunction power(double c, double gamma);
  //! c * 1{x >= a0}.
  static RateFunction step(double c, double a0);

  double operator()(double x) const;
  //! Integral of the rate over [0, x].
  double cumulative(double x) const;
  double cumulative(double x0, double x1) const;
  //! Smallest x1 >= x0 with cumulative(x0, x1) = e.
  double inverse_cumulative(double x0, double e) const;

  Form form() const { return form_; }
  const std::vector<double>& grid() const { return grid_; }
  const std::vector<double>& values() const { return values_; }
  TailPolicy tail() const { return tail_; }
  double tail_exponent() const { return tail_exponent_; }
  double param_c() const { return c_; }
  double param_gamma() const { return gamma_; }
  double param_a0() const { return a0_; }

  //! Samples the rate on a grid (closed forms included).
  RateFunction tabulate(const std::vector<double>& grid) const;

 private:
  Form form_ = Form::constant;
  double c_ = 1.0, gamma_ = 0.0, a0_ = 0.0;
  std::vector<double> grid_, values_, cum_;
  TailPolicy tail_ = TailPolicy::constant_last;
  double tail_exponent_ = 0.0;

  double cum_from0(double x) const;
  double inv_from0(double h) const;
};

double eval_rate(const RateFunction& B, double x);
double cumulative_hazard(const RateFunction& B, double x0, double x1);

//! Individual growth law dx/dt = scale * tau(x).
class GrowthLaw {
 public:
  GrowthLaw() = default;
  static GrowthLaw exponential(double kappa);
  //! Piecewise-linear tau, constant extrapolation outside the table.
  static GrowthLaw tabulated(std::vector<double> grid, std::vector<double> tau);

  bool is_exponential() const { return exponential_; }
  double kappa() const { return kappa_; }
  double tau(double x) const;
  //! Characteristic map X(t, x).
  double flow(double t, double x, double scale = 1.0) const;
  //! Time needed to grow from x0 to x1.
  double flow_time(double x0, double x1, double scale = 1.0) const;

 private:
  bool exponential_ = true;
  double kappa_ = 1.0;
  std::vector<double> grid_, tau_, theta_;
  double theta(double x) const;
  double theta_inv(double th) const;
};

//! Self-similar fragmentation: equal mitosis or a symmetric density on (0,1).
class FragmentationKernel {
 public:
  FragmentationKernel() = default;
  static FragmentationKernel mitosis();
  static FragmentationKernel density(std::vector<double> grid, std::vector<double> b0);
  //! Uniform density b0 = 1 on (0,1).
  static FragmentationKernel uniform();

  bool is_mitosis() const { return mitosis_; }
  double pdf(double z) const;
  double cdf(double z) const;
  //! Ratio alpha with P(alpha <= cdf^-1(u)).
  double quantile(double u) const;
  //! Mellin transform of b0 at s.
  std::complex<double> mellin(std::complex<double> s) const;
  const std::vector<double>& grid() const { return grid_; }
  const std::vector<double>& values() const { return b0_; }

 private:
  bool mitosis_ = true;
  std::vector<double> grid_, b0_, cdf_;
};

enum class Trigger { age, size, increment };

struct GrowthVariability {
  double mean = 1.0;
  double cv = 0.0;
};

struct ModelSpec {
  Trigger trigger = Trigger::age;
  RateFunction rate;
  GrowthLaw growth;
  FragmentationKernel kernel;
  std::optional<GrowthVariability> variability;
};

struct CellRecord {
  std::string id;
  std::string parent;  //!< empty for roots
  double birth_time = 0.0;
  double size_birth = 0.0;
  double lifetime = 0.0;
  double size_division = 0.0;
  double increment = 0.0;
  double growth_rate = 0.0;
  //! Snapshot observables for cells alive at T (VT).
  double age_at_T = 0.0;
  double size_at_T = 0.0;
};

enum class Scheme { U1, U2, VT };

struct SampleSet {
  Scheme scheme = Scheme::U1;
  double parameter = 0.0;  //!< depth n for U1, horizon T otherwise
  std::vector<CellRecord> records;
  std::string metadata = "experimental";
  std::size_t censored = 0;     //!< cells alive at T excluded from lifetime samples
  bool truncated = false;       //!< live-cell cap reached
  bool has_sizes = true;        //!< false when size columns were absent at ingestion
};

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& s);
SampleSet merge(const std::vector<SampleSet>& sets);

//! Function or density tabulated on a 1D grid, or on a tensor grid (x, y) with values[i*ny+j].
struct GridDensity {
  std::vector<double> x;
  std::vector<double> y;  //!< empty for 1D
  std::vector<double> values;
  bool geometric = false;    //!< x grid has a fixed ratio
  bool geometric_y = false;  //!< y grid has a fixed ratio
  //! Integrate as finite-volume cell averages (sum of value * cell width) instead of the trapezoid rule.
  bool cell_quadrature = false;
  double normalization = 0.0;

  GridDensity() = default;
  GridDensity(std::vector<double> grid, std::vector<double> vals, bool geom = false);
  GridDensity(std::vector<double> gx, std::vector<double> gy, std::vector<double> vals);

  int dim() const { return y.empty() ? 1 : 2; }
  std::size_t size() const { return x.size(); }
  double at(double t) const;  //!< linear interpolation, zero outside
  double integral() const;    //!< trapezoid rule, or cell sums when cell_quadrature is set
  void refresh_normalization() { normalization = integral(); }
  void normalize();
  //! Quadrature weights of the cells centred at the grid points.
  std::vector<double> cell_widths() const;
  std::vector<double> cell_widths_y() const;
};

//! Polynomial kernel on [-1, 1]; order is the index of the first nonvanishing moment.
class KernelSpec {
 public:
  KernelSpec() : KernelSpec(biweight()) {}
  KernelSpec(int order, std::vector<double> coefficients);

  static KernelSpec biweight();
  static KernelSpec order4();
  static KernelSpec box();
  //! Multiplies `base` by an even polynomial so that moments 1..order-1 vanish.
  static KernelSpec corrected(const KernelSpec& base, int order);

  int order() const { return order_; }
  double support_lo() const { return -1.0; }
  double support_hi() const { return 1.0; }
  const std::vector<double>& coefficients() const { return coef_; }

  double operator()(double u) const;
  double derivative(double u) const;
  //! Integral of K over [-1, t].
  double integral_to(double t) const;
  //! Integral of u^j K(u) over [lo, hi] intersected with the support.
  double moment(int j, double lo = -1.0, double hi = 1.0) const;
  double roughness() const;  //!< integral of K^2

  double kh(double a, double h) const { return (*this)(a / h) / h; }

 private:
  int order_ = 2;
  std::vector<double> coef_;
};

struct EigenTriplet {
  double lambda = 0.0;
  GridDensity N;
  std::vector<double> phi;
  int k = 2;
  bool oscillatory = false;  //!< mitosis with exponential growth
  std::size_t iterations = 0;
  double residual = 0.0;
  std::map<std::string, double> diagnostics;
};

struct EstimationResult {
  GridDensity estimate;
  double h = 0.0;
  double h2 = 0.0;      //!< spectral cutoff bandwidth when used
  double varpi = 0.0;   //!< denominator floor
  std::vector<std::uint8_t> flags;  //!< 1 where the floor was hit or the value was clipped
  std::size_t floor_hits = 0;
  double effective_n = 0.0;
  double lambda = 0.0;
  std::map<std::string, double> diagnostics;
};

}  // namespace divrate
