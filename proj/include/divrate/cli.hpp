#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "divrate/compare.hpp"
#include "divrate/simulate.hpp"

namespace divrate {

enum class Command { simulate, eigen, estimate, compare };
std::string command_name(Command c);
Command command_from_name(const std::string& s);

struct SchemeConfig {
  SchemeRequest request = SchemeRequest::U1(1000);
  std::size_t replicates = 1;
  Root root;
  bool warm_start = true;  //!< burn the root's birth size in along a genealogy first
  std::size_t live_cap = kDefaultLiveCap;
};

struct EstimatorConfig {
  //! age_genealogical, age_population, age_pointdata, size_genealogical, size_dynamics, size_pointdata,
  //! increment_genealogical, increment_population, increment_from_size_marginal
  std::string kind = "age_genealogical";
  std::string kernel = "biweight";
  int order = 0;             //!< 0 keeps the kernel's own order
  double h = 0.0;            //!< 0 selects by `bandwidth_method`
  std::string bandwidth_method = "rule_of_thumb";
  std::optional<double> lambda, kappa, horizon;
  int k = 0;                 //!< 0: 1 for genealogical data, 2 otherwise
  double varpi = 0.0;        //!< 0 keeps the estimator's default floor
  double smoothness = 2.0;
  std::optional<std::array<double, 2>> range;
  std::size_t grid_points = 201;
  double cutoff = 0.0;
  int points_per_octave = 64;
  double x_bar = 0.0;
};

struct EigenConfig {
  int k = 2;
  std::size_t n = 4096;          //!< age grid points
  int points_per_octave = 32;    //!< size grids
  std::optional<double> x_min, x_max;
  std::size_t max_steps = 200000;
  double tol = 1e-10;
};

struct CompareConfig {
  std::vector<ModelType> models = {ModelType::timer, ModelType::sizer, ModelType::adder};
  CompareOptions options;
};

//! A validated run. `resolved` holds every setting with defaults filled in; rerunning it reproduces the run.
struct RunConfig {
  Command command = Command::simulate;
  std::uint64_t seed = 1;
  std::filesystem::path output = "divrate_out";
  unsigned workers = 0;
  std::filesystem::path data;
  std::optional<ModelSpec> model;
  SchemeConfig scheme;
  EstimatorConfig estimator;
  EigenConfig eigen;
  CompareConfig compare;
  std::optional<RateFunction> truth;  //!< known rate of synthetic data
  std::optional<std::array<double, 2>> truth_window;
  nlohmann::ordered_json resolved;
};

//! Command-line values; they take precedence over the file, which takes precedence over defaults.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output;
  std::optional<std::filesystem::path> data;
};

//! Parses a JSON config (comments allowed). Unknown keys, type errors and missing blocks raise ValidationError
//! with the key path; syntax errors report line and column. Relative paths are taken from `base_dir`.
RunConfig parse_config(const std::string& text, Command command, const std::string& source,
                       const std::filesystem::path& base_dir = {}, const CliOverrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, Command command, const CliOverrides& overrides = {});

RateFunction rate_from_json(const nlohmann::ordered_json& j, const std::string& path = "rate");

struct CommandOutput {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> lines;  //!< human-readable summary for stdout
};

//! Each command writes resolved_config.json next to its outputs.
CommandOutput cmd_simulate(const RunConfig& cfg);
CommandOutput cmd_eigen(const RunConfig& cfg);
CommandOutput cmd_estimate(const RunConfig& cfg);
CommandOutput cmd_compare(const RunConfig& cfg);
CommandOutput run_command(const RunConfig& cfg);

//! Full command line; returns 0 on success, 1 on validation failure, 2 on numerical failure.
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace divrate
