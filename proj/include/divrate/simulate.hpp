#pragma once

#include <cstddef>
#include <vector>

#include "divrate/core.hpp"
#include "divrate/rng.hpp"

namespace divrate {

struct Root {
  double size_birth = 1.0;
  double birth_time = 0.0;
};

struct SchemeRequest {
  Scheme scheme = Scheme::U1;
  double parameter = 0.0;
  static SchemeRequest U1(std::size_t n) { return {Scheme::U1, static_cast<double>(n)}; }
  static SchemeRequest U2(double T) { return {Scheme::U2, T}; }
  static SchemeRequest VT(double T) { return {Scheme::VT, T}; }
};

constexpr std::size_t kDefaultLiveCap = 1000000;

double sample_lifetime_age(const RateFunction& B, RngStream& rng);
double sample_division_size(const RateFunction& B, double size_birth, RngStream& rng);
double sample_increment(const RateFunction& B, RngStream& rng);

//! Individual growth rate; equals the law's kappa (or 1 for tabulated laws) without variability.
double sample_growth_rate(const ModelSpec& spec, RngStream& rng);

//! Divided cells (U2) and cells alive at T (VT) of one tree.
struct Population {
  SampleSet divided;
  SampleSet alive;
};

Population simulate_population(const ModelSpec& spec, double T, Root root, RngStream& rng,
                               std::size_t live_cap = kDefaultLiveCap);

SampleSet simulate_tree(const ModelSpec& spec, SchemeRequest scheme, Root root, RngStream& rng,
                        std::size_t live_cap = kDefaultLiveCap);

//! Birth size after a genealogical burn-in, used as a warm-start root.
double stationary_birth_size(const ModelSpec& spec, double start, RngStream& rng, std::size_t burn_in = 200);

enum class Observable {
  lifetimes,
  birth_sizes,
  division_sizes,
  increments,
  ages_at_T,
  sizes_at_T,
  joint_age_size,
  joint_increment_size
};

Observable observable_from_name(const std::string& s);
std::vector<double> observable(const SampleSet& s, Observable which);

//! Kernel-smoothed density (h > 0) or normalized histogram (h == 0) of an observable.
GridDensity empirical_densities(const SampleSet& s, Observable which, const KernelSpec& K, double h,
                                std::size_t n_grid = 512);

//! Count series N(t) = 1 + divisions up to t reconstructed from a U2 sample.
std::vector<std::pair<double, double>> population_counts(const SampleSet& u2, const std::vector<double>& times);

}  // namespace divrate
