#include "divrate/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>

#include "divrate/numerics.hpp"
#include "divrate/smoothing.hpp"

namespace divrate {

double sample_lifetime_age(const RateFunction& B, RngStream& rng) { return B.inverse_cumulative(0.0, rng.exponential()); }

double sample_division_size(const RateFunction& B, double size_birth, RngStream& rng) {
  if (!(size_birth >= 0.0)) throw ValidationError("division size: birth size must be nonnegative");
  return B.inverse_cumulative(size_birth, rng.exponential());
}

double sample_increment(const RateFunction& B, RngStream& rng) { return B.inverse_cumulative(0.0, rng.exponential()); }

namespace {

double reference_rate(const ModelSpec& spec) {
  if (spec.growth.is_exponential()) return spec.growth.kappa();
  return spec.variability ? spec.variability->mean : 1.0;
}

double gamma_draw(double mean, double cv, RngStream& rng) {
  if (cv <= 0.0) return mean;
  double shape = 1.0 / (cv * cv);
  std::gamma_distribution<double> g(shape, mean / shape);
  return g(rng);
}

struct Life {
  double kappa, scale, lifetime, size_division;
};

// Draws one cell's growth rate and division event.
Life draw_life(const ModelSpec& spec, double xi, RngStream& rng) {
  Life L{};
  L.kappa = sample_growth_rate(spec, rng);
  L.scale = L.kappa / reference_rate(spec);
  switch (spec.trigger) {
    case Trigger::age:
      L.lifetime = sample_lifetime_age(spec.rate, rng);
      L.size_division = spec.growth.flow(L.lifetime, xi, L.scale);
      break;
    case Trigger::size:
      L.size_division = sample_division_size(spec.rate, xi, rng);
      L.lifetime = spec.growth.flow_time(xi, L.size_division, L.scale);
      break;
    case Trigger::increment:
      L.size_division = xi + sample_increment(spec.rate, rng);
      L.lifetime = spec.growth.flow_time(xi, L.size_division, L.scale);
      break;
  }
  return L;
}

CellRecord make_record(const std::string& id, const std::string& parent, double b, double xi, const Life& L) {
  CellRecord r;
  r.id = id;
  r.parent = parent;
  r.birth_time = b;
  r.size_birth = xi;
  r.lifetime = L.lifetime;
  r.size_division = L.size_division;
  r.increment = L.size_division - xi;
  r.growth_rate = L.kappa;
  return r;
}

std::pair<double, double> daughters(const ModelSpec& spec, double chi, RngStream& rng) {
  if (spec.kernel.is_mitosis()) return {0.5 * chi, 0.5 * chi};
  double a = spec.kernel.quantile(rng.uniform());
  double first = a * chi;
  return {first, chi - first};
}

}  // namespace

double sample_growth_rate(const ModelSpec& spec, RngStream& rng) {
  double ref = reference_rate(spec);
  if (!spec.variability || spec.variability->cv <= 0.0) return ref;
  return gamma_draw(spec.variability->mean, spec.variability->cv, rng);
}

Population simulate_population(const ModelSpec& spec, double T, Root root, RngStream& rng, std::size_t live_cap) {
  if (!(root.size_birth > 0.0)) throw ValidationError("simulate: root size must be positive");
  Population pop;
  pop.divided.scheme = Scheme::U2;
  pop.alive.scheme = Scheme::VT;
  pop.divided.parameter = pop.alive.parameter = T;
  pop.divided.metadata = pop.alive.metadata = "simulated";

  struct Pending {
    double birth;
    double size;
    std::string id, parent;
    std::uint64_t order;
  };
  auto later = [](const Pending& a, const Pending& b) {
    if (a.birth != b.birth) return a.birth > b.birth;
    return a.order > b.order;
  };
  std::priority_queue<Pending, std::vector<Pending>, decltype(later)> queue(later);
  std::uint64_t order = 0;
  queue.push({root.birth_time, root.size_birth, "u", "", order++});
  while (!queue.empty()) {
    if (queue.size() > live_cap) {
      pop.divided.truncated = pop.alive.truncated = true;
      break;
    }
    Pending c = queue.top();
    queue.pop();
    if (c.birth > T) continue;
    Life L = draw_life(spec, c.size, rng);
    CellRecord rec = make_record(c.id, c.parent, c.birth, c.size, L);
    if (c.birth + L.lifetime <= T) {
      pop.divided.records.push_back(rec);
      auto [s0, s1] = daughters(spec, L.size_division, rng);
      double b = c.birth + L.lifetime;
      queue.push({b, s0, c.id + "0", c.id, order++});
      queue.push({b, s1, c.id + "1", c.id, order++});
    } else {
      rec.age_at_T = T - c.birth;
      rec.size_at_T = spec.growth.flow(rec.age_at_T, c.size, L.kappa / reference_rate(spec));
      pop.alive.records.push_back(rec);
    }
  }
  pop.divided.censored = pop.alive.records.size();
  return pop;
}

SampleSet simulate_tree(const ModelSpec& spec, SchemeRequest scheme, Root root, RngStream& rng, std::size_t live_cap) {
  if (!(root.size_birth > 0.0)) throw ValidationError("simulate: root size must be positive");
  if (scheme.scheme == Scheme::U1) {
    SampleSet s;
    s.scheme = Scheme::U1;
    s.parameter = scheme.parameter;
    s.metadata = "simulated";
    const std::size_t n = static_cast<std::size_t>(scheme.parameter);
    s.records.reserve(n + 1);
    std::string id = "u", parent;
    double b = root.birth_time, xi = root.size_birth;
    for (std::size_t g = 0; g <= n; ++g) {
      Life L = draw_life(spec, xi, rng);
      s.records.push_back(make_record(id, parent, b, xi, L));
      auto [s0, s1] = daughters(spec, L.size_division, rng);
      bool second = rng.uniform() < 0.5;
      parent = id;
      // Paths grow linearly with depth; keep ids compact by storing the generation and last bit.
      id = "u" + std::to_string(g + 1) + (second ? "b" : "a");
      if (n <= 64) id = parent + (second ? "1" : "0");
      xi = second ? s1 : s0;
      b += L.lifetime;
    }
    return s;
  }
  Population p = simulate_population(spec, scheme.parameter, root, rng, live_cap);
  return scheme.scheme == Scheme::U2 ? p.divided : p.alive;
}

double stationary_birth_size(const ModelSpec& spec, double start, RngStream& rng, std::size_t burn_in) {
  SampleSet s = simulate_tree(spec, SchemeRequest::U1(burn_in), Root{start, 0.0}, rng);
  return s.records.back().size_division * 0.5;
}

Observable observable_from_name(const std::string& s) {
  if (s == "lifetimes") return Observable::lifetimes;
  if (s == "birth_sizes") return Observable::birth_sizes;
  if (s == "division_sizes") return Observable::division_sizes;
  if (s == "increments") return Observable::increments;
  if (s == "ages_at_T") return Observable::ages_at_T;
  if (s == "sizes_at_T") return Observable::sizes_at_T;
  if (s == "joint_age_size") return Observable::joint_age_size;
  if (s == "joint_increment_size") return Observable::joint_increment_size;
  throw ValidationError("unknown observable '" + s + "'");
}

std::vector<double> observable(const SampleSet& s, Observable which) {
  std::vector<double> v;
  v.reserve(s.records.size());
  for (const auto& r : s.records) {
    switch (which) {
      case Observable::lifetimes:
      case Observable::joint_age_size:
        v.push_back(r.lifetime);
        break;
      case Observable::birth_sizes:
        v.push_back(r.size_birth);
        break;
      case Observable::division_sizes:
        v.push_back(r.size_division);
        break;
      case Observable::increments:
      case Observable::joint_increment_size:
        v.push_back(r.increment);
        break;
      case Observable::ages_at_T:
        v.push_back(r.age_at_T);
        break;
      case Observable::sizes_at_T:
        v.push_back(r.size_at_T);
        break;
    }
  }
  return v;
}

namespace {
bool half_line(Observable w) {
  return w == Observable::lifetimes || w == Observable::increments || w == Observable::ages_at_T;
}
}  // namespace

GridDensity empirical_densities(const SampleSet& s, Observable which, const KernelSpec& K, double h,
                                std::size_t n_grid) {
  if (s.records.empty()) throw ValidationError("empirical density: empty selection");
  if (which == Observable::joint_age_size || which == Observable::joint_increment_size) {
    std::vector<double> a = observable(s, which);
    std::vector<double> x = observable(s, Observable::division_sizes);
    double ha = h > 0 ? h : rule_of_thumb_bandwidth(a, K.order());
    double sx = std::sqrt(num::variance(x)), sa = std::sqrt(num::variance(a));
    double hx = sa > 0 ? ha * sx / sa : ha;
    const std::size_t n2 = std::max<std::size_t>(16, n_grid / 4);
    auto [amin, amax] = std::minmax_element(a.begin(), a.end());
    auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
    std::vector<double> ga = num::linspace(std::max(0.0, *amin - ha), *amax + ha, n2);
    std::vector<double> gx = num::linspace(std::max(0.0, *xmin - hx), *xmax + hx, n2);
    std::vector<double> vals(n2 * n2, 0.0);
    for (std::size_t r = 0; r < a.size(); ++r)
      for (std::size_t i = 0; i < n2; ++i) {
        double ka = K.kh(ga[i] - a[r], ha);
        if (ka == 0.0) continue;
        for (std::size_t j = 0; j < n2; ++j) vals[i * n2 + j] += ka * K.kh(gx[j] - x[r], hx);
      }
    GridDensity d(ga, gx, vals);
    d.normalize();
    return d;
  }
  std::vector<double> v = observable(s, which);
  auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  if (h == 0.0) {
    // Normalized histogram, padded by empty bins on both sides.
    std::size_t nb = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(v.size())))));
    double width = *mx > *mn ? (*mx - *mn) / static_cast<double>(nb) : 1.0;
    std::vector<double> centers(nb + 2), counts(nb + 2, 0.0);
    double start = *mx > *mn ? *mn : *mn - 0.5 * width;
    for (std::size_t b = 0; b < nb + 2; ++b) centers[b] = start + (static_cast<double>(b) - 0.5) * width;
    for (double t : v) {
      std::size_t b = std::min(nb - 1, static_cast<std::size_t>((t - start) / width));
      counts[b + 1] += 1.0;
    }
    GridDensity d(centers, counts);
    d.normalize();
    return d;
  }
  std::optional<double> lower;
  double lo = *mn - h;
  if (half_line(which) && lo <= 0.0) {
    lower = 0.0;
    lo = 0.0;
  }
  KernelSmoother sm(v, {}, K, h, lower);
  std::vector<double> g = num::linspace(lo, *mx + h, n_grid);
  GridDensity d(g, sm.density(g));
  d.normalize();
  return d;
}

std::vector<std::pair<double, double>> population_counts(const SampleSet& u2, const std::vector<double>& times) {
  std::vector<double> div;
  std::size_t roots = 0;
  for (const auto& r : u2.records) {
    div.push_back(r.birth_time + r.lifetime);
    if (r.parent.empty()) ++roots;
  }
  roots = std::max<std::size_t>(roots, 1);
  std::sort(div.begin(), div.end());
  std::vector<std::pair<double, double>> out;
  for (double t : times) {
    auto n = static_cast<double>(std::upper_bound(div.begin(), div.end(), t) - div.begin());
    out.emplace_back(t, static_cast<double>(roots) + n);
  }
  return out;
}

}  // namespace divrate
