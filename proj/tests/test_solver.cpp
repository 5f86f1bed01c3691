#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <chrono>
#include <cmath>

#include "divrate/numerics.hpp"
#include "divrate/rng.hpp"
#include "divrate/simulate.hpp"
#include "divrate/solver.hpp"

using namespace divrate;

namespace {
double rel_l1(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += std::abs(a[i] - b[i]);
    den += std::abs(b[i]);
  }
  return num / den;
}

std::vector<double> cells_of(const GridDensity& d) {
  std::vector<double> w = d.cell_widths(), c(d.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = d.values[i] * w[i];
  return c;
}
}  // namespace

TEST_CASE("malthus parameter") {
  for (double b : {0.5, 1.0, 2.0}) CHECK(std::abs(malthus_renewal(RateFunction::constant(b)) - b) < 1e-10);
  CHECK(malthus_renewal(RateFunction::power(2.0, 1.0), 1) == 0.0);
  // Numeric quadrature path agrees with the closed form on a tabulated constant.
  RateFunction tab({0.0, 10.0}, {1.0, 1.0});
  CHECK(std::abs(malthus_renewal(tab) - 1.0) < 1e-9);
  // Monotone in B.
  CHECK(malthus_renewal(RateFunction::power(2.0, 1.0)) < malthus_renewal(RateFunction::power(3.0, 1.0)));
}

TEST_CASE("renewal eigenelements") {
  for (double b : {0.5, 1.0, 2.0}) {
    EigenTriplet t = renewal_eigen(RateFunction::constant(b), 2, 4096);
    double err = 0.0;
    for (std::size_t i = 0; i < t.N.size(); ++i)
      err = std::max(err, std::abs(t.N.values[i] - 2.0 * b * std::exp(-2.0 * b * t.N.x[i])));
    CHECK(err < 1e-8);
    CHECK(t.diagnostics.at("phi_sup_over_phi0") <= 2.0);
  }
  EigenTriplet t1 = renewal_eigen(RateFunction::power(2.0, 1.0), 1, 512);
  for (double p : t1.phi) CHECK(p == 1.0);
  CHECK(t1.lambda == 0.0);

  RateFunction B = RateFunction::power(2.0, 1.0);
  EigenTriplet t2 = renewal_eigen(B, 2, 1024);
  double C = t2.diagnostics.at("N0");
  double mass = num::integrate_to_infinity([&](double a) { return std::exp(-t2.lambda * a - B.cumulative(a)); }, 0.0);
  CHECK(std::abs(C * mass - 1.0) < 1e-10);
  CHECK(t2.diagnostics.at("phi_sup_over_phi0") <= 2.0);
  // <N, phi> = 1 on the fine grid.
  std::vector<double> prod(t2.N.size());
  for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = t2.N.values[i] * t2.phi[i];
  CHECK(num::trapezoid(t2.N.x, prod) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("renewal solver: conservation, growth and eigen stationarity") {
  std::vector<double> a = num::linspace(0.0, 3.0, 301), v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[i] = 1.0 + std::sin(3.0 * a[i]);
  GridDensity n0(a, v);

  Trajectory c = solve_renewal(n0, RateFunction::constant(1.0), 1, 2.0, 1e-3);
  CHECK(std::abs(c.states.back().integral() + c.lost.back() - c.states.front().integral()) < 1e-8);

  Trajectory g = solve_renewal(n0, RateFunction::constant(1.0), 2, 1.0, 1e-3);
  double ratio = g.states.back().integral() / g.states.front().integral();
  CHECK(std::abs(ratio - std::exp(1.0)) / std::exp(1.0) < 1e-6);

  RateFunction B = RateFunction::power(2.0, 1.0);
  RenewalSolver s(B, 2, 1e-3, renewal_age_cutoff(B, malthus_renewal(B)) + 1.0);
  EigenTriplet d = s.discrete_triplet();
  CHECK(std::abs(d.lambda - malthus_renewal(B)) < 1e-5);
  std::vector<double> M = cells_of(d.N), M1 = M;
  for (int i = 0; i < 1000; ++i) s.step(M1);
  double growth = std::exp(d.lambda * 1.0);
  for (double& x : M1) x /= growth;
  CHECK(rel_l1(M1, M) < 1e-6);

  // Continuous eigenvector as initial condition.
  EigenTriplet ct = renewal_eigen(B, 2, 4096);
  std::vector<double> Mc = s.to_cells(ct.N), Mc1 = Mc;
  for (int i = 0; i < 1000; ++i) s.step(Mc1);
  for (double& x : Mc1) x /= std::exp(ct.lambda);
  CHECK(rel_l1(Mc1, Mc) < 1e-5);

  // Adjoint duality.
  std::vector<double> M0 = s.to_cells(n0), Mt = M0;
  for (int i = 0; i < 1000; ++i) s.step(Mt);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < M0.size(); ++i) {
    lhs += d.phi[i] * Mt[i];
    rhs += d.phi[i] * M0[i];
  }
  CHECK(std::abs(lhs / growth - rhs) / rhs < 1e-6);
}

TEST_CASE("renewal GRE is nonincreasing") {
  RateFunction B = RateFunction::power(2.0, 1.0);
  RenewalSolver s(B, 2, 2e-3, renewal_age_cutoff(B, malthus_renewal(B)) + 1.0);
  EigenTriplet d = s.discrete_triplet();
  RngStream rng(5, 0);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> M = cells_of(d.N);
    double c1 = rng.uniform(), c2 = rng.uniform() * 6.0;
    for (std::size_t i = 0; i < M.size(); ++i) M[i] *= 1.0 + 0.9 * c1 * std::sin(c2 * s.ages()[i]);
    EntropyTrace tr = gre_renewal(s, M, 2.0);
    CHECK(tr.max_increase <= 1e-8);
    CHECK(tr.values.back() < tr.values.front());
  }
}

TEST_CASE("growth-fragmentation eigen: exponential growth, mitosis") {
  SolverGrid grid = SolverGrid::geometric(std::exp2(-12.0), 8.0, 32);
  for (double kappa : {0.5, 1.0}) {
    auto t0 = std::chrono::steady_clock::now();
    EigenTriplet t = gf_eigen(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(kappa), FragmentationKernel::mitosis(),
                              2, grid);
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(std::abs(t.lambda - kappa) < 1e-6);
    CHECK(t.oscillatory);
    CHECK(sec < 30.0);
  }
  EigenTriplet t2 = gf_eigen(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 2, grid);
  EigenTriplet t1 = gf_eigen(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 1, grid);
  CHECK(std::abs(t1.lambda) < 1e-6);
  // phi_2 proportional to x and N_1 proportional to x N_2 away from the boundaries.
  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 0; i < t2.N.size(); ++i) {
    if (t2.N.x[i] < 0.25) lo = i;
    if (t2.N.x[i] < 2.5) hi = i;
  }
  std::size_t mid = (lo + hi) / 2;
  double C = t2.phi[mid] / t2.N.x[mid];
  double Cp = t1.N.values[mid] / (t2.N.x[mid] * t2.N.values[mid]);
  double dev_phi = 0.0, dev_N = 0.0;
  for (std::size_t i = lo; i <= hi; ++i) {
    dev_phi = std::max(dev_phi, std::abs(t2.phi[i] / (C * t2.N.x[i]) - 1.0));
    dev_N = std::max(dev_N, std::abs(t1.N.values[i] / (Cp * t2.N.x[i] * t2.N.values[i]) - 1.0));
  }
  CHECK(dev_phi < 1e-3);
  CHECK(dev_N < 1e-3);
  CHECK(t2.N.integral() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("growth-fragmentation eigen: density kernel and stationarity") {
  SolverGrid grid = SolverGrid::geometric(std::exp2(-14.0), 8.0, 32);
  FragmentationKernel tri = FragmentationKernel::density({0.0, 0.5, 1.0}, {0.0, 2.0, 0.0});
  GrowthFragOperator op(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), tri, 2, grid);
  EigenTriplet t = gf_eigen(op);
  CHECK(!t.oscillatory);
  CHECK(std::abs(t.lambda - 1.0) < 5e-3);
  std::vector<double> M = cells_of(t.N), M1 = M;
  double lost = 0.0;
  std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / op.dt()));
  for (std::size_t s = 0; s < steps; ++s) op.step(M1, &lost);
  double sm = 0.0;
  for (double v : M1) sm += v;
  for (double& v : M1) v /= sm;
  CHECK(rel_l1(M1, M) < 1e-4);
}

namespace {
// Residuals of d/dt int n = (k-1) int tau B n and d/dt int x n = (k/2-1) int x tau B n + int tau n over one unit time.
std::array<double, 2> moment_residuals(const GrowthFragOperator& op, const GrowthLaw& tau, std::vector<double> M) {
  auto moments = [&](const std::vector<double>& u) {
    std::array<double, 5> m{};
    for (std::size_t i = 0; i < u.size(); ++i) {
      double x = op.x()[i], b = op.division_rate()[i];
      m[0] += u[i];
      m[1] += x * u[i];
      m[2] += b * u[i];
      m[3] += x * b * u[i];
      m[4] += tau.tau(x) * u[i];
    }
    return m;
  };
  const int k = op.k();
  auto first = moments(M), prev = first;
  double i_div = 0.0, i_xdiv = 0.0, i_grow = 0.0;
  std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / op.dt()));
  for (std::size_t s = 0; s < steps; ++s) {
    op.step(M);
    auto cur = moments(M);
    i_div += 0.5 * (prev[2] + cur[2]) * op.dt();
    i_xdiv += 0.5 * (prev[3] + cur[3]) * op.dt();
    i_grow += 0.5 * (prev[4] + cur[4]) * op.dt();
    prev = cur;
  }
  double T = static_cast<double>(steps) * op.dt();
  double r0 = std::abs(prev[0] - first[0] - (k - 1) * i_div) / (first[0] * T);
  double r1 = std::abs(prev[1] - first[1] - (k / 2.0 - 1.0) * i_xdiv - i_grow) / (first[1] * T);
  return {r0, r1};
}
}  // namespace

TEST_CASE("growth-fragmentation solver: moment balances") {
  RateFunction B = RateFunction::power(1.0, 1.0);
  // Linear growth on a uniform grid exercises the splitting scheme.
  GrowthLaw lin = GrowthLaw::tabulated({0.0, 100.0}, {1.0, 1.0});
  GrowthFragOperator probe(B, lin, FragmentationKernel::mitosis(), 1, SolverGrid::uniform(12.0, 4096));
  for (int k : {1, 2}) {
    GrowthFragOperator op(B, lin, FragmentationKernel::mitosis(), k, SolverGrid::uniform(12.0, 4096, 1e-3));
    std::vector<double> M(op.size());
    for (std::size_t i = 0; i < M.size(); ++i) M[i] = std::exp(-20.0 * std::pow(op.x()[i] - 1.5, 2)) * op.widths()[i];
    auto r = moment_residuals(op, lin, M);
    MESSAGE("uniform k=", k, " residuals ", r[0], " ", r[1]);
    CHECK(r[0] < 1e-3);
    CHECK(r[1] < 1e-3);
  }
  // Exponential growth on a 2^12-point geometric grid uses the characteristic step.
  GrowthLaw ex = GrowthLaw::exponential(1.0);
  SolverGrid geo = SolverGrid::geometric(std::exp2(-9.0), 8.0, 4096 / 12);
  for (int k : {1, 2}) {
    GrowthFragOperator op(B, ex, FragmentationKernel::mitosis(), k, geo);
    std::vector<double> M(op.size());
    for (std::size_t i = 0; i < M.size(); ++i) M[i] = std::exp(-20.0 * std::pow(op.x()[i] - 1.5, 2)) * op.widths()[i];
    auto r = moment_residuals(op, ex, M);
    MESSAGE("geometric k=", k, " residuals ", r[0], " ", r[1]);
    CHECK(r[0] < 1e-3);
    CHECK(r[1] < 1e-3);
  }
}

TEST_CASE("mitosis oscillation: conserved on geometric grid, damped on uniform grid") {
  RateFunction B = RateFunction::power(1.0, 1.0);
  auto n0f = [](double x) { return std::exp(-30.0 * std::pow(x - 1.0, 2)); };
  SolverGrid geo = SolverGrid::geometric(std::exp2(-12.0), 8.0, 32);
  std::vector<double> xg = geo.points(), vg(xg.size());
  for (std::size_t i = 0; i < xg.size(); ++i) vg[i] = n0f(xg[i]);
  GridDensity ng(xg, vg, true);
  double period = std::log(2.0);
  Trajectory tg = solve_growth_frag(ng, B, GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 2, period, geo, 2);
  double p0 = std::abs(oscillation_projection(tg.states.front(), 1.0, 2, tg.times.front()));
  double p1 = std::abs(oscillation_projection(tg.states.back(), 1.0, 2, tg.times.back()));
  CHECK(std::abs(p1 / p0 - 1.0) < 0.01);

  SolverGrid uni = SolverGrid::uniform(8.0, 1024);
  std::vector<double> xu = uni.points(), vu(xu.size());
  for (std::size_t i = 0; i < xu.size(); ++i) vu[i] = n0f(xu[i]);
  GridDensity nu(xu, vu);
  Trajectory tu = solve_growth_frag(nu, B, GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 2, period, uni, 2);
  double q0 = std::abs(oscillation_projection(tu.states.front(), 1.0, 2, tu.times.front()));
  double q1 = std::abs(oscillation_projection(tu.states.back(), 1.0, 2, tu.times.back()));
  MESSAGE("uniform damping ", q1 / q0, " geometric ", p1 / p0);
  CHECK(q1 / q0 < 0.9);
}

TEST_CASE("growth-fragmentation GRE") {
  SolverGrid grid = SolverGrid::geometric(std::exp2(-12.0), 8.0, 32);
  GrowthFragOperator op(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 2, grid);
  EigenTriplet t = gf_eigen(op);
  std::vector<double> M = cells_of(t.N);
  for (std::size_t i = 0; i < M.size(); ++i) M[i] *= 1.0 + 0.8 * std::sin(5.0 * std::log(op.x()[i]));
  EntropyTrace tr = gre_growth_frag(op, M, 3.0);
  CHECK(tr.max_increase <= 1e-8);
  CHECK(tr.values.back() < tr.values.front());
}

TEST_CASE("two-variable steady states") {
  SolverGrid grid = SolverGrid::geometric(std::exp2(-8.0), 8.0, 32);
  for (double kappa : {0.5, 1.0}) {
    EigenTriplet t = adder_steady(RateFunction::power(1.0, 1.0), kappa, 2, grid);
    CHECK(std::abs(t.lambda - kappa) < 1e-4);
    CHECK(t.N.integral() == doctest::Approx(1.0).epsilon(1e-10));
  }
  SteadyState sz = simulate_to_steady(RateFunction::power(1.0, 1.0), ModelType::sizer, 1.0, 2, grid);
  CHECK(sz.stabilized);
  EigenTriplet g = gf_eigen(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(), 2, grid);
  CHECK(rel_l1(sz.size_marginal.values, g.N.values) < 1e-3);
  SteadyState tm = simulate_to_steady(RateFunction::constant(1.0), ModelType::timer, 1.0, 2, grid, 20000);
  CHECK(!tm.stabilized);
}
