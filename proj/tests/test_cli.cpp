#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "divrate/cli.hpp"
#include "divrate/io.hpp"

using namespace divrate;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

fs::path scratch() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("divrate_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path write_file(const std::string& name, const std::string& text) {
  fs::path p = scratch() / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string l; std::getline(is, l);) ++n;
  return n;
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "divrate");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

RunConfig config(const std::string& text, Command c, const std::string& out) {
  CliOverrides ov;
  ov.output = scratch() / out;
  return parse_config(text, c, "test.json", scratch(), ov);
}

std::string validation_error(const std::string& text, Command c) {
  try {
    parse_config(text, c, "cfg.json", scratch());
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

const std::string kAdderModel = R"("model": {"trigger": "increment", "rate": {"form": "power", "c": 3, "exponent": 2}})";
const std::string kSizerModel = R"("model": {"trigger": "size", "rate": {"form": "power", "c": 1, "exponent": 4}})";
// Weibull shape-3 lifetimes with mean ln 2.
const std::string kTimerModel =
    R"("model": {"trigger": "age", "rate": {"form": "power", "c": 6.41459668318249, "exponent": 2}})";

}  // namespace

TEST_CASE("simulate: minimal age model, U1(3)") {
  RunConfig c = config(R"({"model": {"trigger": "age", "rate": 1.0}, "scheme": {"type": "U1", "n": 3}})",
                       Command::simulate, "min");
  CommandOutput o = cmd_simulate(c);
  CHECK(line_count(scratch() / "min" / "samples_000.csv") == 5);
  CHECK(fs::exists(scratch() / "min" / "summary.json"));
  CHECK(fs::exists(scratch() / "min" / "resolved_config.json"));
  auto s = json::parse(slurp(scratch() / "min" / "summary.json"));
  CHECK(s["total_records"] == 4);
  SampleSet d = ingest_lineage_csv(scratch() / "min" / "samples_000.csv");
  CHECK(d.records.size() == 4);
  CHECK(d.records[0].size_birth == 1.0);  // no warm start for the age trigger
}

TEST_CASE("simulate: determinism, replicates, worker independence, resolved config") {
  const std::string text = R"({"model": {"trigger": "age", "rate": 1.0}, "scheme": {"type": "U2", "T": 5, "replicates": 8},
                               "seed": 17})";
  RunConfig a = config(text, Command::simulate, "rep_a");
  a.workers = 1;
  cmd_simulate(a);
  RunConfig b = config(text, Command::simulate, "rep_b");
  b.workers = 4;
  cmd_simulate(b);
  for (int r = 0; r < 8; ++r) {
    std::string name = "samples_00" + std::to_string(r) + ".csv";
    REQUIRE(fs::exists(scratch() / "rep_a" / name));
    CHECK(slurp(scratch() / "rep_a" / name) == slurp(scratch() / "rep_b" / name));
  }
  CHECK_FALSE(fs::exists(scratch() / "rep_a" / "samples_008.csv"));
  CHECK(slurp(scratch() / "rep_a" / "summary.json") == slurp(scratch() / "rep_b" / "summary.json"));
  auto s = json::parse(slurp(scratch() / "rep_a" / "summary.json"));
  CHECK(s["replicates"].size() == 8);
  CHECK(s["lambda_hat_mean"].get<double>() == doctest::Approx(1.0).epsilon(0.15));
  CHECK(slurp(scratch() / "rep_a" / "samples_000.csv") != slurp(scratch() / "rep_a" / "samples_001.csv"));

  // The resolved copy reproduces the run.
  CliOverrides ov;
  ov.output = scratch() / "rep_c";
  RunConfig c = load_config(scratch() / "rep_a" / "resolved_config.json", Command::simulate, ov);
  cmd_simulate(c);
  CHECK(slurp(scratch() / "rep_a" / "samples_005.csv") == slurp(scratch() / "rep_c" / "samples_005.csv"));

  // A flag overrides the file.
  ov.output = scratch() / "rep_d";
  ov.seed = 18;
  RunConfig d = load_config(scratch() / "rep_a" / "resolved_config.json", Command::simulate, ov);
  CHECK(d.resolved["seed"] == 18);
  cmd_simulate(d);
  CHECK(slurp(scratch() / "rep_a" / "samples_000.csv") != slurp(scratch() / "rep_d" / "samples_000.csv"));
}

TEST_CASE("config validation") {
  std::string e = validation_error(R"({"model": {"trigger": "age", "rate": 1}, "scheme": {"type": "U1", "n": 3},
                                       "sede": 4})",
                                   Command::simulate);
  CHECK(e.find("unknown key 'sede'") != std::string::npos);
  e = validation_error(R"({"model": {"trigger": "age", "rate": {"form": "power", "exponant": 1}}})", Command::eigen);
  CHECK(e.find("'model.rate.exponant'") != std::string::npos);
  e = validation_error(R"({"model": {"trigger": "age", "rate": 1}, "scheme": {"type": "U1", "n": -3}})",
                       Command::simulate);
  CHECK(e.find("'scheme.n'") != std::string::npos);
  e = validation_error(R"({"model": {"trigger": "mass", "rate": 1}})", Command::eigen);
  CHECK(e.find("model.trigger") != std::string::npos);
  e = validation_error("{\n  \"model\": {\"trigger\": \"age\",\n   \"rate\": 1,,\n}}", Command::eigen);
  CHECK(e.find("line 3") != std::string::npos);
  e = validation_error(R"({"model": {"trigger": "age", "rate": 1}})", Command::simulate);
  CHECK(e.find("'scheme'") != std::string::npos);
  e = validation_error(R"({"estimator": {"kind": "age_genealogical"}})", Command::estimate);
  CHECK(e.find("'data'") != std::string::npos);
  e = validation_error(R"({"command": "eigen", "model": {"trigger": "age", "rate": 1}})", Command::simulate);
  CHECK(e.find("'eigen'") != std::string::npos);
  e = validation_error(R"({"data": "x.csv", "estimator": {"kind": "age_magic"}})", Command::estimate);
  CHECK(e.find("unknown estimator") != std::string::npos);
  e = validation_error(R"({"data": "x.csv", "compare": {"models": ["timer", "mixer"]}})", Command::compare);
  CHECK_FALSE(e.empty());

  // Comments are allowed and defaults are echoed in full.
  RunConfig c = parse_config("// eigen run\n{\"model\": {\"trigger\": \"size\", \"rate\": 2}}", Command::eigen, "c.json");
  CHECK(c.resolved["model"]["growth"]["kappa"] == 1.0);
  CHECK(c.resolved["model"]["kernel"]["type"] == "mitosis");
  CHECK(c.resolved["eigen"]["k"] == 2);
}

TEST_CASE("eigen command") {
  RunConfig c = config(R"({"model": {"trigger": "age", "rate": 1.0}})", Command::eigen, "eig_age");
  cmd_eigen(c);
  auto j = json::parse(slurp(scratch() / "eig_age" / "eigen.json"));
  CHECK(std::abs(j["lambda"].get<double>() - 1.0) < 1e-10);
  CHECK(j["warnings"].empty());
  CHECK(line_count(scratch() / "eig_age" / "eigen.csv") == 4097);

  RunConfig s = config(R"({"model": {"trigger": "size", "rate": {"form": "power", "c": 1, "exponent": 1}}})",
                       Command::eigen, "eig_size");
  cmd_eigen(s);
  auto js = json::parse(slurp(scratch() / "eig_size" / "eigen.json"));
  CHECK(std::abs(js["lambda"].get<double>() - 1.0) < 1e-6);
  CHECK(js["oscillatory"].get<bool>());
  CHECK(js["warnings"].size() == 1);

  RunConfig u = config(R"({"model": {"trigger": "size", "rate": {"form": "power", "c": 1, "exponent": 1},
                                     "kernel": "uniform"}})",
                       Command::eigen, "eig_uniform");
  cmd_eigen(u);
  CHECK(json::parse(slurp(scratch() / "eig_uniform" / "eigen.json"))["warnings"].empty());
}

TEST_CASE("estimate command") {
  RunConfig sim = config(R"({"model": {"trigger": "age", "rate": 1.0}, "scheme": {"type": "U1", "n": 20000}})",
                         Command::simulate, "est_data");
  cmd_simulate(sim);
  const std::string data = (scratch() / "est_data" / "samples_000.csv").string();

  RunConfig e = config(R"({"data": ")" + data + R"(", "estimator": {"kind": "age_genealogical"},
                          "truth": {"rate": 1.0, "window": [0, 2]}})",
                       Command::estimate, "est_out");
  CommandOutput o = cmd_estimate(e);
  CHECK(fs::exists(scratch() / "est_out" / "estimate.csv"));
  auto j = json::parse(slurp(scratch() / "est_out" / "estimate.json"));
  CHECK(j["truth"]["sup_error"].get<double>() < 0.2);
  bool summary = false;
  for (const auto& l : o.lines) summary = summary || l.find("error vs truth on [0, 2]") != std::string::npos;
  CHECK(summary);
  CHECK(slurp(scratch() / "est_out" / "estimate.csv").rfind("x,B,flag,B_true\n", 0) == 0);

  // An estimator that needs lambda, on data without a count series.
  RunConfig vt = config(R"({"model": {"trigger": "age", "rate": 1.0}, "scheme": {"type": "VT", "T": 6}})",
                        Command::simulate, "est_vt");
  cmd_simulate(vt);
  RunConfig p = config(R"({"data": ")" + (scratch() / "est_vt" / "samples_000.csv").string() +
                           R"(", "estimator": {"kind": "age_pointdata"}})",
                       Command::estimate, "est_vt_out");
  try {
    cmd_estimate(p);
    FAIL("expected a validation error");
  } catch (const ValidationError& err) {
    CHECK(std::string(err.what()).find("estimator.lambda") != std::string::npos);
  }
  // Genealogical estimator on population data.
  RunConfig wrong = config(R"({"data": ")" + (scratch() / "est_vt" / "samples_000.csv").string() +
                               R"(", "estimator": {"kind": "size_genealogical"}})",
                           Command::estimate, "est_wrong");
  CHECK_THROWS_AS(cmd_estimate(wrong), ValidationError);

  // Schema violations come back itemized through the command line with exit code 1.
  fs::path bad = write_file("bad.csv",
                            "id,parent_id,birth_time,size_birth,lifetime,size_division,increment,growth_rate,scheme\n"
                            "u,,0,-1,1,2,3,1,U1\nu0,u,0.5,1,1,2,1,1,U1\n");
  fs::path cfg = write_file("bad.json", R"({"data": "bad.csv", "estimator": {"kind": "age_genealogical"}, "output": "bad_out"})");
  Run r = cli({"estimate", "--config", cfg.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("size_birth must be positive") != std::string::npos);
  CHECK(r.err.find("before its parent divides") != std::string::npos);
}

TEST_CASE("compare command: three dispatch checks") {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {kAdderModel, "adder"}, {kSizerModel, "sizer"}, {kTimerModel, "timer"}};
  for (const auto& [model, expected] : cases) {
    RunConfig sim = config("{" + model + R"(, "scheme": {"type": "U1", "n": 10000}, "seed": 7})", Command::simulate,
                           "cmp_data_" + expected);
    cmd_simulate(sim);
    fs::path data = scratch() / ("cmp_data_" + expected) / "samples_000.csv";
    RunConfig c = config(R"({"data": ")" + data.string() + R"("})", Command::compare, "cmp_" + expected);
    cmd_compare(c);
    auto j = json::parse(slurp(scratch() / ("cmp_" + expected) / "comparison.json"));
    CHECK(j["ranking"][0] == expected);
    CHECK(j["models"].size() == 3);
    if (expected == "timer") {
      // Sizes drift along timer lineages, so only the correlation rows rank.
      CHECK(j["ranking_basis"] == "correlation_deviation");
    } else {
      CHECK(j["models"][0]["degenerate"].get<bool>());  // timer with exponential growth
      CHECK(j["models"][0]["distance"].is_null());
    }
    CHECK(line_count(scratch() / ("cmp_" + expected) / "correlations.csv") == 5);
  }
}

TEST_CASE("command line: exit codes and overrides") {
  fs::path cfg = write_file("sim.json", R"({"model": {"trigger": "age", "rate": 1.0}, "scheme": {"type": "U1", "n": 3}})");
  Run ok = cli({"simulate", "--config", cfg.string(), "--out", (scratch() / "cli_ok").string(), "--seed", "9"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("4 records") != std::string::npos);
  CHECK(json::parse(slurp(scratch() / "cli_ok" / "resolved_config.json"))["seed"] == 9);

  CHECK(cli({}).code == 1);
  CHECK(cli({"simulate"}).code == 1);
  CHECK(cli({"simulate", "--config", "/nonexistent.json"}).code == 1);
  CHECK(cli({"simulate", "--help"}).code == 0);

  // Numerical failure: the two-variable solver is given too few steps to converge.
  fs::path nf = write_file("nf.json", "{" + kAdderModel + R"(, "eigen": {"max_steps": 3}, "output": "nf"})");
  Run fail = cli({"eigen", "--config", nf.string()});
  CHECK(fail.code == 2);
  CHECK(fail.err.find("numerical failure in adder_steady") != std::string::npos);
}

TEST_CASE("worker cap from the environment") {
  ::setenv("DIVRATE_WORKERS", "1", 1);
  CHECK(worker_count(8) == 1);
  CHECK(worker_count() == 1);
  ::unsetenv("DIVRATE_WORKERS");
  CHECK(worker_count(8) == 8);
}
