#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <clocale>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "divrate/estimators.hpp"
#include "divrate/io.hpp"
#include "divrate/simulate.hpp"

using namespace divrate;

namespace {

ModelSpec adder() {
  ModelSpec s;
  s.trigger = Trigger::increment;
  s.rate = RateFunction::power(3.0, 2.0);
  return s;
}

SampleSet reparse(const SampleSet& s) {
  std::stringstream ss;
  write_sample_csv(ss, s);
  return parse_lineage_csv(ss, "memory");
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

void check_equal(const SampleSet& a, const SampleSet& b) {
  CHECK(a.scheme == b.scheme);
  CHECK(a.has_sizes == b.has_sizes);
  REQUIRE(a.records.size() == b.records.size());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto &x = a.records[i], &y = b.records[i];
    bool eq = x.id == y.id && x.parent == y.parent && same(x.birth_time, y.birth_time) && same(x.lifetime, y.lifetime);
    if (a.has_sizes)
      eq = eq && same(x.size_birth, y.size_birth) && same(x.size_division, y.size_division) &&
           same(x.increment, y.increment) && same(x.growth_rate, y.growth_rate);
    if (a.scheme == Scheme::VT) eq = eq && same(x.age_at_T, y.age_at_T) && same(x.size_at_T, y.size_at_T);
    bad += !eq;
  }
  CHECK(bad == 0);
}

std::string error_of(const std::string& csv) {
  std::istringstream is(csv);
  try {
    parse_lineage_csv(is, "t.csv");
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

const char* kHeader = "id,parent_id,birth_time,size_birth,lifetime,size_division,increment,growth_rate,scheme\n";

}  // namespace

TEST_CASE("number formatting: 17 significant digits, locale-independent, exact round trip") {
  CHECK(format_number(1.0) == "1");
  CHECK(format_number(0.1) == "0.10000000000000001");
  CHECK(format_number(-2.5e-300) == "-2.5e-300");
  CHECK(format_number(std::nan("")) == "nan");
  CHECK(format_number(-INFINITY) == "-inf");
  // A comma-decimal locale must not leak into the output.
  const char* old = std::setlocale(LC_ALL, nullptr);
  std::string saved = old ? old : "C";
  bool switched = std::setlocale(LC_ALL, "de_DE.UTF-8") || std::setlocale(LC_ALL, "fr_FR.UTF-8");
  CHECK(format_number(1234.5) == "1234.5");
  CHECK(parse_number("1234.5") == 1234.5);
  std::setlocale(LC_ALL, saved.c_str());
  MESSAGE("comma-decimal locale available: " << switched);

  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  for (int i = 0; i < 10000; ++i) {
    double v = std::exp(u(g)) * (i % 2 ? -1.0 : 1.0);
    REQUIRE(parse_number(format_number(v)) == v);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    REQUIRE(format_number(v) == buf);
  }
  CHECK_THROWS_AS(parse_number("1,5"), ValidationError);
  CHECK_THROWS_AS(parse_number("abc"), ValidationError);
  CHECK_THROWS_AS(parse_number(""), ValidationError);
}

TEST_CASE("lineage CSV round trip for every scheme") {
  ModelSpec s = adder();
  RngStream r1(1, 0);
  SampleSet u1 = simulate_tree(s, SchemeRequest::U1(500), Root{1.0, 0.0}, r1);
  SampleSet b1 = reparse(u1);
  check_equal(u1, b1);
  CHECK(b1.parameter == 500.0);

  RngStream r2(2, 0);
  Population pop = simulate_population(s, 6.0, Root{1.0, 0.0}, r2);
  SampleSet b2 = reparse(pop.divided);
  check_equal(pop.divided, b2);
  CHECK(b2.parameter <= 6.0);
  SampleSet b3 = reparse(pop.alive);
  check_equal(pop.alive, b3);
  CHECK(b3.parameter == doctest::Approx(6.0).epsilon(1e-12));

  // Deep chains use compact ids; the structure check still passes.
  RngStream r3(3, 0);
  SampleSet deep = simulate_tree(s, SchemeRequest::U1(3000), Root{1.0, 0.0}, r3);
  check_equal(deep, reparse(deep));

  // Without the scheme column the scheme is inferred from the tree shape.
  std::stringstream ss;
  write_sample_csv(ss, pop.divided);
  std::string text = ss.str(), out;
  std::istringstream lines(text);
  for (std::string l; std::getline(lines, l);) out += l.substr(0, l.rfind(',')) + "\n";
  std::istringstream is(out);
  CHECK(parse_lineage_csv(is, "noscheme").scheme == Scheme::U2);
}

TEST_CASE("partial schema gives an age-only sample") {
  std::ostringstream os;
  os << "id,parent_id,birth_time,lifetime\n";
  RngStream rng(4, 0);
  ModelSpec s;
  SampleSet u1 = simulate_tree(s, SchemeRequest::U1(2000), Root{1.0, 0.0}, rng);
  for (const auto& r : u1.records)
    os << r.id << ',' << r.parent << ',' << format_number(r.birth_time) << ',' << format_number(r.lifetime) << '\n';
  std::istringstream is(os.str());
  SampleSet d = parse_lineage_csv(is, "ages.csv");
  CHECK_FALSE(d.has_sizes);
  CHECK(d.scheme == Scheme::U1);
  CHECK(std::isnan(d.records[0].size_birth));
  auto life = observable(d, Observable::lifetimes);
  EstimationResult e = estimate_B_age_genealogical(life, KernelSpec::biweight(), 0.3, {0.5, 1.0});
  CHECK(e.estimate.values[0] == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("ingestion rejects malformed lineages with an itemized report") {
  std::string e = error_of(std::string(kHeader) + "u,,0,2,1,1.5,-0.5,0.3,U1\n");
  CHECK(e.find("size_division < size_birth") != std::string::npos);
  CHECK(e.find("line 2") != std::string::npos);

  e = error_of("id,parent_id,lifetime\nu,,1\n");
  CHECK(e.find("missing required column 'birth_time'") != std::string::npos);

  e = error_of(std::string(kHeader) + "u,,0,-1,1,2,3,1,U1\n");
  CHECK(e.find("size_birth must be positive") != std::string::npos);

  // Orphan and cycle.
  e = error_of("id,parent_id,birth_time,lifetime\na,x,0,1\n");
  CHECK(e.find("not in the file") != std::string::npos);
  e = error_of("id,parent_id,birth_time,lifetime,scheme\na,b,1,1,U2\nb,a,2,1,U2\nr,,0,1,U2\n");
  CHECK(e.find("cyclic") != std::string::npos);

  // Daughter born before the mother divides; lifetime inconsistent with the daughter's birth.
  e = error_of("id,parent_id,birth_time,lifetime\nu,,0,1\nu0,u,0.5,1\n");
  CHECK(e.find("before its parent divides") != std::string::npos);
  e = error_of("id,parent_id,birth_time,lifetime\nu,,0,1\nu0,u,1.5,1\n");
  CHECK(e.find("does not match") != std::string::npos);

  // Derived increment cross-check at 1e-6 relative.
  CHECK(error_of(std::string(kHeader) + "u,,0,1,0.6931471805599453,2,1.0000005,1,U1\n").empty());
  e = error_of(std::string(kHeader) + "u,,0,1,0.6931471805599453,2,1.00001,1,U1\n");
  CHECK(e.find("increment") != std::string::npos);

  // Several problems are listed together.
  e = error_of(std::string(kHeader) + "u,,0,2,1,1.5,-0.5,0.3,U1\nu0,u,0.2,1,1,2,1,0.7,U1\nu00,u0,x,1,1,2,1,0.7,U1\n");
  CHECK(e.find("3 problems") != std::string::npos);

  CHECK(error_of(std::string(kHeader) + "u,,0,1,1,2,1,1\n").find("expected 9 fields") != std::string::npos);
  CHECK(error_of("id,parent_id,birth_time,lifetime,color\nu,,0,1,red\n").find("unknown column 'color'") !=
        std::string::npos);
  CHECK(error_of("id,parent_id,birth_time,lifetime\nu,,0,1\nu0,u,1,1\nu1,u,1,1\nu2,u,1,1\n").find("more than two") !=
        std::string::npos);
  CHECK(error_of(std::string(kHeader) + "u,,0,1,1,2,1,1,U1\nu0,u,1,1,1,2,1,1,U1\nu1,u,1,1,1,2,1,1,U1\n")
            .find("genealogical") != std::string::npos);
  CHECK_THROWS_AS(ingest_lineage_csv("/nonexistent/file.csv"), ValidationError);
}

TEST_CASE("result exports") {
  auto dir = std::filesystem::temp_directory_path() / ("divrate_io_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);

  EstimationResult r;
  r.estimate = GridDensity({0.0, 0.5, 1.0}, {1.0, 1.1, 0.9});
  r.flags = {0, 0, 1};
  r.h = 0.2;
  RateFunction truth = RateFunction::constant(1.0);
  write_estimate_csv(dir / "e.csv", r, &truth);
  std::ifstream is(dir / "e.csv");
  std::string l1, l2;
  std::getline(is, l1);
  std::getline(is, l2);
  CHECK(l1 == "x,B,flag,B_true");
  CHECK(l2 == "0,1,0,1");
  CHECK(estimate_json(r)["h"].get<double>() == 0.2);

  EigenTriplet t;
  t.lambda = 1.0;
  t.N = GridDensity({0.0, 1.0}, {1.0, 0.5});
  t.phi = {1.0, 1.0};
  write_eigen_csv(dir / "eig.csv", t);
  std::ifstream ie(dir / "eig.csv");
  std::string h;
  std::getline(ie, h);
  CHECK(h == "x,N,phi");
  CHECK(eigen_json(t)["doubling_time"].get<double>() == doctest::Approx(std::log(2.0)));

  ComparisonReport rep;
  ModelReport m;
  m.model.type = ModelType::timer;
  m.degenerate = true;
  rep.models.push_back(m);
  rep.ranking = {0};
  rep.data_row.value = {-0.5, 0.5, 0.85, 0.5, 0.0, 0.87};
  rep.data_row.defined.fill(true);
  auto j = comparison_json(rep);
  CHECK(j["models"][0]["distance"].is_null());
  CHECK(j["models"][0]["degenerate"].get<bool>());
  CHECK(j["ranking"][0] == "timer");
  write_correlation_csv(dir / "c.csv", rep);
  std::ifstream ic(dir / "c.csv");
  std::string c1, c2, c3;
  std::getline(ic, c1);
  std::getline(ic, c2);
  std::getline(ic, c3);
  CHECK(c1 == "source,AD/SB,AD/SD,AD/ID,SB/SD,SB/ID,SD/ID");
  CHECK(c2 == "data,-0.5,0.5,0.84999999999999998,0.5,0,0.87");
  CHECK(c3 == "timer,,,,,,");
  std::filesystem::remove_all(dir);
}
