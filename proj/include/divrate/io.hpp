#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "divrate/compare.hpp"
#include "divrate/core.hpp"

namespace divrate {

//! 17 significant digits, '.' decimal separator whatever the global locale; "nan", "inf", "-inf" otherwise.
std::string format_number(double v);
//! Full-field parse of a decimal number; throws ValidationError naming `what` on failure.
double parse_number(std::string_view s, const std::string& what = "number");

// ---------------------------------------------------------------- lineage CSV

//! Header id,parent_id,birth_time,size_birth,lifetime,size_division,increment,growth_rate,scheme, followed by
//! age_at_T,size_at_T for snapshot data. Size columns are left out when the set has no sizes.
void write_sample_csv(std::ostream& os, const SampleSet& s);
void write_sample_csv(const std::filesystem::path& path, const SampleSet& s);

struct IngestOptions {
  double tolerance = 1e-6;            //!< relative tolerance of the derived-field and timing checks
  std::optional<Scheme> scheme;       //!< overrides the scheme column (or the inferred scheme)
  std::optional<double> horizon;      //!< T for U2/VT; inferred from the latest event otherwise
  std::size_t max_reported = 25;      //!< problems listed in the error message
};

//! Reads and validates a lineage table. Required columns: id, parent_id, birth_time, lifetime; without
//! size_birth/size_division the set is flagged has_sizes = false. Increments are recomputed and cross-checked,
//! lifetimes are checked against the daughters' birth times; cycles, orphans (except for snapshot data, whose
//! parents are not observed), negative or shrinking sizes, and daughters born before their mother divides are
//! rejected. All problems are itemized in one ValidationError.
SampleSet ingest_lineage_csv(const std::filesystem::path& path, const IngestOptions& opt = {});
SampleSet parse_lineage_csv(std::istream& is, const std::string& source, const IngestOptions& opt = {});

// ---------------------------------------------------------------- result exports

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

//! Columns x, B, flag, and B_true when a reference rate is given.
void write_estimate_csv(const std::filesystem::path& path, const EstimationResult& r,
                        const RateFunction* truth = nullptr);
nlohmann::ordered_json estimate_json(const EstimationResult& r);

//! x, N, phi for 1D triplets; xi, x, N, phi over the filled triangle for two-variable ones.
void write_eigen_csv(const std::filesystem::path& path, const EigenTriplet& t);
nlohmann::ordered_json eigen_json(const EigenTriplet& t);

//! Non-finite numbers become null; degenerate candidates carry "degenerate": true.
nlohmann::ordered_json comparison_json(const ComparisonReport& r);
//! One row per source (data, then the models in declaration order), coefficient columns in table order.
void write_correlation_csv(const std::filesystem::path& path, const ComparisonReport& r);
//! Long format: coordinate, source, x, density.
void write_marginals_csv(const std::filesystem::path& path, const ComparisonReport& r);

}  // namespace divrate
