#pragma once

#include <complex>
#include <functional>
#include <vector>

#include "divrate/core.hpp"

namespace divrate {

//! Spatial grid for size-structured solvers; points are cell centres.
struct SolverGrid {
  enum class Kind { uniform, geometric };
  Kind kind = Kind::geometric;
  double x_min = 0.0;
  double x_max = 1.0;
  std::size_t n = 0;  //!< number of points (uniform)
  int m = 32;         //!< points per octave (geometric)
  double dt = 0.0;    //!< requested time step; 0 selects one from the CFL bound

  static SolverGrid uniform(double x_max, std::size_t n, double dt = 0.0);
  //! Points x_min * 2^{i/m} up to the first point >= x_max.
  static SolverGrid geometric(double x_min, double x_max, int m = 32, double dt = 0.0);

  std::vector<double> points() const;
  double ratio() const;  //!< 2^{1/m} for geometric grids
  bool is_geometric() const { return kind == Kind::geometric; }
};

//! Geometric grid sized so that cells almost surely divide before leaving it (size trigger).
SolverGrid default_size_grid(const RateFunction& B, int m = 32, int octaves = 18);

struct Trajectory {
  std::vector<double> times;
  std::vector<GridDensity> states;
  std::vector<double> lost;  //!< cumulative mass that left the grid at each snapshot
};

struct EntropyTrace {
  std::vector<double> times;
  std::vector<double> values;
  std::vector<double> dissipation;  //!< -(H(t+dt) - H(t)) / dt
  double max_increase = 0.0;         //!< largest per-step increase of H
};

// ---------------------------------------------------------------- renewal (age) model

//! Integral of B(a) exp(-lambda a - H(a)) over the half-line.
double renewal_laplace(const RateFunction& B, double lambda);

//! Malthusian parameter: 0 for k = 1, otherwise the root of k * renewal_laplace(B, lambda) = 1.
double malthus_renewal(const RateFunction& B, int k = 2);

//! Age where lambda a + H(a) first exceeds `level`.
double renewal_age_cutoff(const RateFunction& B, double lambda, double level = 40.0);

//! Continuous eigenelements sampled on a uniform age grid of n points over [0, cutoff].
EigenTriplet renewal_eigen(const RateFunction& B, int k, std::size_t n = 4096);
EigenTriplet renewal_eigen(const RateFunction& B, int k, const std::vector<double>& ages);

//! Exact-survival age stepper: cells of width da, each step ages every cell by one cell.
class RenewalSolver {
 public:
  RenewalSolver(RateFunction B, int k, double da, double a_max);

  std::size_t size() const { return s_.size(); }
  double dt() const { return da_; }
  int k() const { return k_; }
  const std::vector<double>& ages() const { return ages_; }

  //! One step on cell masses; mass aging past the grid is added to `lost` and no longer divides.
  void step(std::vector<double>& M, double* lost = nullptr) const;
  void adjoint_step(std::vector<double>& phi) const;
  //! Births produced in one step from the current state.
  double births(const std::vector<double>& M) const;

  //! Eigenelements of the discrete step (lambda = ln(rho) / da).
  EigenTriplet discrete_triplet() const;

  std::vector<double> to_cells(const GridDensity& n0) const;
  GridDensity to_density(const std::vector<double>& M) const;

 private:
  RateFunction B_;
  int k_;
  double da_;
  double q_;  //!< in-step division probability of a newborn
  std::vector<double> ages_, s_, f_;
};

//! Solver sized for a horizon T starting from n0; n_snapshots >= 2 evenly spaced records.
RenewalSolver make_renewal_solver(const GridDensity& n0, const RateFunction& B, int k, double T, double da = 1e-3);
Trajectory solve_renewal(const GridDensity& n0, const RateFunction& B, int k, double T, double da = 1e-3,
                         std::size_t n_snapshots = 11);

// ---------------------------------------------------------------- growth-fragmentation (size) model

class GrowthFragOperator {
 public:
  GrowthFragOperator(RateFunction B, GrowthLaw tau, FragmentationKernel b, int k, SolverGrid grid);

  std::size_t size() const { return x_.size(); }
  const std::vector<double>& x() const { return x_; }
  const std::vector<double>& widths() const { return w_; }
  double dt() const { return dt_; }
  int k() const { return k_; }
  //! Exact characteristic shift (geometric grid with exponential growth).
  bool characteristic() const { return characteristic_; }
  //! Mitosis with exponential growth: the spectrum has a circle of dominant eigenvalues.
  bool oscillatory() const { return oscillatory_; }
  //! Steps per block in power iteration (one oscillation period on characteristic grids).
  std::size_t period() const;
  //! Time-hazard tau(x) B(x) at the grid points.
  const std::vector<double>& division_rate() const { return beta_; }

  void step(std::vector<double>& M, double* lost = nullptr) const;
  void adjoint_step(std::vector<double>& phi) const;

  std::vector<double> to_cells(const GridDensity& n0) const;
  GridDensity to_density(const std::vector<double>& M) const;

 private:
  RateFunction B_;
  GrowthLaw tau_;
  FragmentationKernel b_;
  int k_;
  SolverGrid grid_;
  std::vector<double> x_, w_, beta_, courant_, survive_;
  std::vector<double> kernel_w_;  //!< geometric: offset weights; children land d cells below
  std::vector<double> newborn_q_; //!< characteristic: fraction of newborns dividing within their birth step
  double dt_ = 0.0;
  std::size_t substeps_ = 1;
  bool characteristic_ = false, oscillatory_ = false;

  void transport(std::vector<double>& M, double* lost) const;
  void transport_adjoint(std::vector<double>& phi) const;
  void divide(std::vector<double>& M, double delta, double* lost) const;
  void divide_adjoint(std::vector<double>& phi, double delta) const;
  void scatter(std::size_t i, double children, std::vector<double>& out, double* lost) const;
  double gather(std::size_t i, const std::vector<double>& phi) const;
  void place_newborns(std::vector<double>& nb, std::vector<double>& out, double* lost) const;
  std::vector<double> newborn_value(const std::vector<double>& phi) const;
};

//! Dominant eigenelements by block power iteration on the step operator and its transpose.
EigenTriplet gf_eigen(const RateFunction& B, const GrowthLaw& tau, const FragmentationKernel& b, int k,
                      const SolverGrid& grid, std::size_t max_steps = 100000, double tol = 1e-10);
EigenTriplet gf_eigen(const GrowthFragOperator& op, std::size_t max_steps = 100000, double tol = 1e-10);

Trajectory solve_growth_frag(const GridDensity& n0, const RateFunction& B, const GrowthLaw& tau,
                             const FragmentationKernel& b, int k, double T, const SolverGrid& grid,
                             std::size_t n_snapshots = 11);

//! <n, x^{k-1+2 i pi j / ln 2}> e^{-lambda_j t} with lambda_j = kappa (k-1 + 2 i pi j / ln 2).
std::complex<double> oscillation_projection(const GridDensity& n, double kappa, int k, double t, int mode = 1);

// ---------------------------------------------------------------- two-variable (birth size, size) model

enum class ModelType { timer, sizer, adder };
std::string model_type_name(ModelType t);
ModelType model_type_from_name(const std::string& s);

//! Population on characteristic coordinates (birth size xi_j, size x_i), j <= i, exponential growth.
//! One step moves every cell one grid point up in size; newborns start on the diagonal.
class CharacteristicSolver {
 public:
  CharacteristicSolver(ModelType type, RateFunction B, double kappa, int k, SolverGrid grid);

  std::size_t n() const { return x_.size(); }
  std::size_t cells() const { return x_.size() * (x_.size() + 1) / 2; }
  std::size_t index(std::size_t j, std::size_t i) const { return i * (i + 1) / 2 + j; }
  const std::vector<double>& x() const { return x_; }
  const std::vector<double>& widths() const { return w_; }
  double dt() const { return dt_; }
  int k() const { return k_; }
  int m() const { return m_; }
  ModelType type() const { return type_; }

  struct StepReport {
    double lost = 0.0;
    double divisions = 0.0;        //!< dividing mass during the step, newborns included
    double injected = 0.0;         //!< newborn mass entering the diagonal
    double boundary_mismatch = 0.0;  //!< max |injected(c) - k * divisions at size index c + m|
  };

  void step(std::vector<double>& M, StepReport* report = nullptr) const;
  void adjoint_step(std::vector<double>& phi) const;

  //! Probability of surviving the step from cell (j, i).
  double survival(std::size_t j, std::size_t i) const;

  //! Initial state from a density f(z, x) with z = x - xi (age (i-j) dt for the timer).
  std::vector<double> from_function(const std::function<double(double, double)>& f) const;
  //! Density on the tensor grid (xi, x), zero above the diagonal.
  GridDensity to_density(const std::vector<double>& M) const;
  std::vector<double> marginal_x(const std::vector<double>& M) const;      //!< counts per size cell
  std::vector<double> marginal_birth(const std::vector<double>& M) const;  //!< counts per birth-size cell
  //! Second coordinate used for export: increment for adder/sizer, age for the timer.
  double second_coordinate(std::size_t j, std::size_t i) const;

 private:
  ModelType type_;
  RateFunction B_;
  double kappa_;
  int k_;
  int m_;
  double dt_;
  std::vector<double> x_, w_;
  std::vector<double> surv_;  //!< per (j, i), triangular storage
  std::vector<double> newborn_q_;
};

Trajectory solve_adder_2d(const std::vector<double>& M0, const CharacteristicSolver& solver, double T,
                          std::size_t n_snapshots = 11, double* max_boundary_mismatch = nullptr);

struct SteadyState {
  ModelType type = ModelType::adder;
  double lambda = 0.0;
  bool stabilized = false;
  std::size_t steps = 0;
  double step_change = 0.0;   //!< L1 change of the normalized profile over the last period
  double lost_fraction = 0.0; //!< mass leaving the grid per unit time, relative
  std::vector<double> cells;  //!< normalized counts (sum 1), period-averaged
  GridDensity joint;          //!< density on (xi, x)
  GridDensity size_marginal;  //!< density in x
  GridDensity birth_marginal; //!< density in xi
};

//! Long-time integration with renormalization until the period-averaged profile is stationary.
SteadyState simulate_to_steady(const RateFunction& B, ModelType type, double kappa, int k, const SolverGrid& grid,
                               std::size_t max_steps = 200000, double tol = 1e-8);

//! Steady profile and adjoint of the adder model as an eigentriplet on (xi, x).
EigenTriplet adder_steady(const RateFunction& B, double kappa, int k, const SolverGrid& grid,
                          std::size_t max_steps = 200000, double tol = 1e-10);

// ---------------------------------------------------------------- entropy

using EntropyFunction = std::function<double(double)>;
inline double square_entropy(double u) { return u * u; }

//! General relative entropy sum phi_i N_i H(M_i / (rho^t N_i)) along the discrete dynamics.
EntropyTrace gre_renewal(const RenewalSolver& solver, std::vector<double> M0, double T,
                         const EntropyFunction& H = square_entropy);
EntropyTrace gre_growth_frag(const GrowthFragOperator& op, std::vector<double> M0, double T,
                             const EntropyFunction& H = square_entropy);

}  // namespace divrate
