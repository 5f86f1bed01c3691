#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "divrate/compare.hpp"
#include "divrate/numerics.hpp"
#include "divrate/simulate.hpp"

using namespace divrate;

namespace {

constexpr double kGamma43 = 0.8929795115692492;

// Increment law of the data-like adder: Weibull of shape 3 (hazard 3 z^2).
ModelSpec adder_model() {
  ModelSpec s;
  s.trigger = Trigger::increment;
  s.rate = RateFunction::power(3.0, 2.0);
  s.growth = GrowthLaw::exponential(1.0);
  return s;
}

ModelSpec sizer_model() {
  ModelSpec s;
  s.trigger = Trigger::size;
  s.rate = RateFunction::power(1.0, 4.0);
  s.growth = GrowthLaw::exponential(1.0);
  return s;
}

// Weibull lifetimes of shape 3 with mean ln 2, so that sizes drift without trend.
ModelSpec timer_model() {
  ModelSpec s;
  s.trigger = Trigger::age;
  s.rate = RateFunction::power(3.0 * std::pow(kGamma43 / std::log(2.0), 3.0), 2.0);
  s.growth = GrowthLaw::exponential(1.0);
  return s;
}

SampleSet chain(const ModelSpec& s, std::uint64_t seed, std::size_t n = 10000) {
  RngStream rng(seed, 7);
  double root = stationary_birth_size(s, 1.0, rng);
  return simulate_tree(s, SchemeRequest::U1(n), Root{root, 0.0}, rng);
}

const std::vector<ModelType> kAll = {ModelType::timer, ModelType::sizer, ModelType::adder};

GridDensity gaussian_mixture(std::mt19937_64& g, double lo, double hi, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto x = num::linspace(lo, hi, n);
  std::vector<double> v(n, 0.0);
  for (int c = 0; c < 3; ++c) {
    double mu = -1.0 + 2.0 * u(g), s = 0.2 + 0.5 * u(g), w = 0.2 + u(g);
    for (std::size_t i = 0; i < n; ++i) v[i] += w * std::exp(-0.5 * std::pow((x[i] - mu) / s, 2)) / s;
  }
  return GridDensity(x, v);
}

// Brute force: CDFs by fine trapezoid sums of the interpolants, then a Riemann sum of |F1 - F2|.
double w1_brute(const GridDensity& a, const GridDensity& b) {
  double lo = std::min(a.x.front(), b.x.front()), hi = std::max(a.x.back(), b.x.back());
  auto g = num::linspace(lo, hi, 200001);
  std::vector<double> pa(g.size()), pb(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) pa[i] = a.at(g[i]), pb[i] = b.at(g[i]);
  auto Fa = num::cumulative_trapezoid(g, pa), Fb = num::cumulative_trapezoid(g, pb);
  std::vector<double> d(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = std::abs(Fa[i] / Fa.back() - Fb[i] / Fb.back());
  return num::trapezoid(g, d);
}

}  // namespace

TEST_CASE("calibrate dispatches on scheme and model") {
  SampleSet d = chain(adder_model(), 1, 2000);
  CHECK(calibrate(d, ModelType::adder).estimator == "increment_genealogical");
  CHECK(calibrate(d, ModelType::sizer).estimator == "size_genealogical");
  CHECK(calibrate(d, ModelType::timer).estimator == "age_genealogical");
  CalibratedModel a = calibrate(d, ModelType::adder);
  CHECK(a.k == 1);
  CHECK(a.kappa == doctest::Approx(1.0).epsilon(1e-9));
  // The fitted increment rate follows 3 z^2 in the bulk.
  for (double z : {0.4, 0.7, 1.0}) CHECK(a.rate(z) == doctest::Approx(3.0 * z * z).epsilon(0.2));

  SampleSet ages = d;
  ages.has_sizes = false;
  try {
    calibrate(ages, ModelType::sizer);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("size_birth") != std::string::npos);
  }
  SampleSet snap;
  snap.scheme = Scheme::VT;
  snap.records.resize(10);
  try {
    calibrate(snap, ModelType::adder);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("lambda") != std::string::npos);
  }
}

TEST_CASE("calibration round trip beats the self-distance") {
  SampleSet a = chain(adder_model(), 11), b = chain(adder_model(), 12);
  MarginalSet ma = data_marginals(a), mb = data_marginals(b);
  auto self = marginal_distances(ma, mb, {});
  double self_mean = (self[0] + self[1] + self[2]) / 3.0;
  CalibratedModel fit = calibrate(a, ModelType::adder);
  SteadyState st;
  MarginalSet mm = model_marginals(fit, a, ma, CompareOptions{}, &st);
  REQUIRE(st.stabilized);
  auto rt = marginal_distances(ma, mm, {});
  double rt_mean = (rt[0] + rt[1] + rt[2]) / 3.0;
  MESSAGE("round trip " << rt_mean << " self " << self_mean);
  CHECK(rt_mean < 1.5 * self_mean);
}

TEST_CASE("two-variable steady states: embedding, degeneracy, growth rate") {
  SolverGrid grid = SolverGrid::geometric(std::exp2(-6.0), 8.0, 32);
  SteadyState sz = simulate_to_steady(RateFunction::power(1.0, 1.0), ModelType::sizer, 1.0, 2, grid);
  REQUIRE(sz.stabilized);
  CHECK(sz.lambda == doctest::Approx(1.0).epsilon(1e-3));
  EigenTriplet e = gf_eigen(RateFunction::power(1.0, 1.0), GrowthLaw::exponential(1.0), FragmentationKernel::mitosis(),
                            2, grid);
  REQUIRE(e.N.x.size() == sz.size_marginal.x.size());
  const auto w = sz.size_marginal.cell_widths();
  const double ma = sz.size_marginal.integral(), mb = e.N.integral();
  double l1 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) l1 += std::abs(sz.size_marginal.values[i] / ma - e.N.values[i] / mb) * w[i];
  MESSAGE("sizer embedding L1 " << l1);
  CHECK(l1 < 1e-3);

  SteadyState ad = simulate_to_steady(RateFunction::power(3.0, 2.0), ModelType::adder, 1.0, 2, grid);
  REQUIRE(ad.stabilized);
  CHECK(ad.lambda == doctest::Approx(1.0).epsilon(1e-3));

  SteadyState tm = simulate_to_steady(RateFunction::constant(1.0), ModelType::timer, 1.0, 2, grid, 20000);
  CHECK_FALSE(tm.stabilized);
}

TEST_CASE("distances: identities and metric axioms") {
  std::mt19937_64 g(5);
  GridDensity d = gaussian_mixture(g, -3.0, 3.0, 301);
  CHECK(distance(d, d) == doctest::Approx(0.0).epsilon(1e-15));
  DistanceSpec l2;
  l2.metric = Metric::l2_regularized;
  l2.h = 0.1;
  CHECK(distance(d, d, l2) == doctest::Approx(0.0).epsilon(1e-15));

  GridDensity p0({-1e-3, 0.0, 1e-3}, {0.0, 1000.0, 0.0}), p1({1.0 - 1e-3, 1.0, 1.0 + 1e-3}, {0.0, 1000.0, 0.0});
  CHECK(distance(p0, p1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(wasserstein1({0.0}, {1.0}) == doctest::Approx(1.0));
  CHECK(wasserstein1({0.0, 1.0, 2.0}, {0.0, 1.0, 2.0}) == 0.0);

  double worst = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(100 + seed);
    GridDensity a = gaussian_mixture(r, -4.0, 4.0, 257), b = gaussian_mixture(r, -3.5, 4.5, 400),
                c = gaussian_mixture(r, -5.0, 3.0, 123);
    double ab = distance(a, b), ba = distance(b, a), bc = distance(b, c), ac = distance(a, c);
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ac <= ab + bc + 1e-12);
    worst = std::max(worst, std::abs(ab - w1_brute(a, b)));
    double l_ab = distance(a, b, l2), l_ba = distance(b, a, l2);
    CHECK(l_ab == doctest::Approx(l_ba).epsilon(1e-10));
    CHECK(distance(a, c, l2) <= l_ab + distance(b, c, l2) + 1e-12);
  }
  MESSAGE("largest deviation from brute-force W1 " << worst);
  CHECK(worst < 1e-6);

  GridDensity two(num::linspace(0, 1, 5), num::linspace(0, 1, 5), std::vector<double>(25, 1.0));
  CHECK_THROWS_AS(distance(d, two), ValidationError);
  CHECK_THROWS_AS(distance(two, two), ValidationError);
  CHECK(distance(two, two, l2) == doctest::Approx(0.0));
}

TEST_CASE("correlation table: scale invariance and degeneracy") {
  SampleSet d = chain(adder_model(), 3, 3000);
  CorrelationRow r = correlation_table(d);
  SampleSet s = d;
  for (auto& c : s.records) c.size_birth *= 3.7, c.size_division *= 3.7, c.increment *= 3.7;
  CorrelationRow q = correlation_table(s);
  for (std::size_t c = 0; c < 6; ++c) {
    REQUIRE(r.defined[c]);
    CHECK(q.value[c] == doctest::Approx(r.value[c]).epsilon(1e-10));
  }
  CHECK(CorrelationRow::labels()[0] == "AD/SB");
  CHECK(CorrelationRow::labels()[5] == "SD/ID");

  SampleSet flat = d;
  for (auto& c : flat.records) c.lifetime = 0.5;
  CorrelationRow f = correlation_table(flat);
  CHECK_FALSE(f.defined[0]);
  CHECK_FALSE(f.defined[2]);
  CHECK(f.defined[3]);
  CHECK(std::isnan(f.value[0]));
}

TEST_CASE("correlation rows of the calibrated models") {
  // Data-like adder; each model is calibrated on it and simulated at n = 10^4.
  SampleSet d = chain(adder_model(), 21);
  ComparisonReport rep = rank_models(d, kAll);
  const std::array<std::array<double, 6>, 3> table = {{{-0.02, 0.04, 0.08, 0.98, 0.93, 0.98},
                                                        {-0.66, 0.67, 0.92, 0.08, -0.39, 0.89},
                                                        {-0.48, 0.51, 0.86, 0.49, -0.01, 0.87}}};
  for (std::size_t m = 0; m < 3; ++m) {
    const CorrelationRow& row = rep.models[m].row;
    for (std::size_t c = 0; c < 6; ++c) {
      REQUIRE(row.defined[c]);
      CHECK(std::abs(row.value[c] - table[m][c]) <= 0.1);
    }
  }
}

TEST_CASE("rank_models recovers the generating model") {
  for (std::uint64_t seed : {31u, 32u}) {
    ComparisonReport a = rank_models(chain(adder_model(), seed), kAll);
    CHECK(a.data_stationary);
    CHECK(a.models[a.ranking[0]].model.type == ModelType::adder);
    CHECK(a.models[0].degenerate);  // timer with exponential growth
    CHECK(a.ranking.back() == 0);
    for (std::size_t i = 1; i < a.ranking.size(); ++i)
      CHECK(a.models[a.ranking[i - 1]].distance <= a.models[a.ranking[i]].distance);
    for (const auto& m : a.models) CHECK(m.distance >= 0.0);

    ComparisonReport s = rank_models(chain(sizer_model(), seed), kAll);
    CHECK(s.models[s.ranking[0]].model.type == ModelType::sizer);

    ComparisonReport t = rank_models(chain(timer_model(), seed), kAll);
    CHECK_FALSE(t.data_stationary);
    CHECK(t.ranking_basis == "correlation_deviation");
    CHECK(t.models[t.ranking[0]].model.type == ModelType::timer);
  }

  // L2 on regularized marginals ranks the same way.
  CompareOptions o;
  o.metric.metric = Metric::l2_regularized;
  o.metric.h = 0.2;
  ComparisonReport l = rank_models(chain(adder_model(), 33), kAll, o);
  CHECK(l.models[l.ranking[0]].model.type == ModelType::adder);
}

TEST_CASE("rank_models ties keep declaration order") {
  SampleSet d = chain(adder_model(), 41, 3000);
  ComparisonReport r = rank_models(d, {ModelType::adder, ModelType::adder});
  CHECK(r.models[0].distance == r.models[1].distance);
  CHECK(r.ranking == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(rank_models(d, {}), ValidationError);
}

TEST_CASE("variability: growth-rate and septum toggles") {
  SampleSet d = chain(adder_model(), 51);
  ComparisonReport base = rank_models(d, {ModelType::sizer});
  const ModelReport& sizer = base.models[0];
  CompareOptions o;
  o.variability.growth_cv = 0.1;
  MarginalSet cv = model_marginals(sizer.model, d, base.data_marginals, o);
  const double s = base.data_marginals.scale[0];
  auto stdz = [&](GridDensity g) {
    for (double& x : g.x) x /= s;
    for (double& v : g.values) v *= s;
    return g;
  };
  double change = distance(stdz(cv.size), stdz(sizer.marginals.size));
  MESSAGE("growth CV 10%: size-marginal change " << change << " against data-to-model distance " << sizer.distance);
  CHECK(change < 0.2 * sizer.distance);

  FragmentationKernel k = beta_septum_kernel(0.1);
  CHECK_FALSE(k.is_mitosis());
  double m1 = 0.0, m2 = 0.0;
  auto z = num::linspace(0.0, 1.0, 4001);
  std::vector<double> p1(z.size()), p2(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p1[i] = z[i] * k.pdf(z[i]), p2[i] = z[i] * z[i] * k.pdf(z[i]);
  m1 = num::trapezoid(z, p1);
  m2 = num::trapezoid(z, p2);
  CHECK(m1 == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(std::sqrt(m2 - m1 * m1) / m1 == doctest::Approx(0.1).epsilon(1e-2));

  o.variability.growth_cv = 0.0;
  o.variability.septum_cv = 0.1;
  o.n_monte_carlo = 50000;
  ComparisonReport sep = rank_models(d, {ModelType::sizer, ModelType::adder}, o);
  CHECK(sep.models[sep.ranking[0]].model.type == ModelType::adder);
}

TEST_CASE("population data: calibration and marginals") {
  ModelSpec s = adder_model();
  RngStream rng(61, 1);
  SampleSet u2 = simulate_tree(s, SchemeRequest::U2(9.0), Root{1.0, 0.0}, rng);
  CalibratedModel a = calibrate(u2, ModelType::adder);
  CHECK(a.k == 2);
  CHECK(a.estimator == "increment_population");
  CHECK(a.fit.lambda == doctest::Approx(1.0).epsilon(0.1));
  CHECK(calibrate(u2, ModelType::timer).estimator == "age_population");
  CHECK(calibrate(u2, ModelType::sizer).estimator == "size_dynamics");
  ComparisonReport r = rank_models(u2, {ModelType::sizer, ModelType::adder});
  MESSAGE("U2 distances sizer " << r.models[0].distance << " adder " << r.models[1].distance);
  CHECK(r.models[r.ranking[0]].model.type == ModelType::adder);

  SampleSet vt = simulate_tree(s, SchemeRequest::VT(9.0), Root{1.0, 0.0}, rng);
  CHECK_THROWS_AS(rank_models(vt, kAll), ValidationError);
}

TEST_CASE("worker count") {
  CHECK(worker_count(3) == 3);
  CHECK(worker_count() >= 1);
}
