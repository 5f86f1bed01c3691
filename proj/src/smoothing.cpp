#include "divrate/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "divrate/numerics.hpp"

namespace divrate {

KernelSmoother::KernelSmoother(std::vector<double> sample, std::vector<double> weights, KernelSpec K, double h,
                               std::optional<double> lower_bound)
    : K_(std::move(K)), h_(h), lower_(lower_bound) {
  if (sample.empty()) throw ValidationError("kernel smoother: empty sample");
  if (!(h > 0.0)) throw ValidationError("kernel smoother: bandwidth must be positive");
  if (!weights.empty() && weights.size() != sample.size())
    throw ValidationError("kernel smoother: weights size mismatch");
  std::vector<std::size_t> idx(sample.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sample[a] < sample[b]; });
  x_.resize(sample.size());
  w_.resize(sample.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    x_[i] = sample[idx[i]];
    w_[i] = weights.empty() ? 1.0 : weights[idx[i]];
  }
  cumw_.assign(x_.size() + 1, 0.0);
  for (std::size_t i = 0; i < x_.size(); ++i) cumw_[i + 1] = cumw_[i] + w_[i];
  total_ = cumw_.back();
  if (!(total_ > 0.0)) throw ValidationError("kernel smoother: total weight must be positive");
}

double KernelSmoother::raw(double a, double p_limit) const {
  // Sum of w K_h(a - X) with an optional local-linear boundary kernel when u is capped at p_limit.
  auto lo = std::lower_bound(x_.begin(), x_.end(), a - h_);
  auto hi = std::upper_bound(x_.begin(), x_.end(), a + h_);
  const bool corrected = p_limit < 1.0;
  double c0 = 1.0, c1 = 0.0;
  if (corrected) {
    double n0 = K_.moment(0, -1.0, p_limit), n1 = K_.moment(1, -1.0, p_limit), n2 = K_.moment(2, -1.0, p_limit);
    double det = n0 * n2 - n1 * n1;
    if (det <= 1e-14) return 0.0;
    c0 = n2 / det;
    c1 = -n1 / det;
  }
  double s = 0.0;
  for (auto it = lo; it != hi; ++it) {
    std::size_t i = static_cast<std::size_t>(it - x_.begin());
    double u = (a - x_[i]) / h_;
    double k = K_(u);
    if (corrected) k *= c0 + c1 * u;
    s += w_[i] * k;
  }
  return s / h_;
}

double KernelSmoother::density(double a) const {
  if (lower_) {
    if (a < *lower_) return 0.0;
    double p = (a - *lower_) / h_;
    return raw(a, p) / total_;
  }
  return raw(a, 2.0) / total_;
}

double KernelSmoother::derivative(double a) const {
  if (lower_ && a - *lower_ < 1.0001 * h_) {
    double d = 1e-4 * h_;
    double lo = std::max(*lower_, a - d), hi = a + d;
    return (density(hi) - density(lo)) / (hi - lo);
  }
  auto lo = std::lower_bound(x_.begin(), x_.end(), a - h_);
  auto hi = std::upper_bound(x_.begin(), x_.end(), a + h_);
  double s = 0.0;
  for (auto it = lo; it != hi; ++it) {
    std::size_t i = static_cast<std::size_t>(it - x_.begin());
    s += w_[i] * K_.derivative((a - x_[i]) / h_);
  }
  return s / (h_ * h_ * total_);
}

double KernelSmoother::survival(double a) const {
  auto it = std::lower_bound(x_.begin(), x_.end(), a);
  std::size_t i = static_cast<std::size_t>(it - x_.begin());
  return (total_ - cumw_[i]) / total_;
}

std::vector<double> KernelSmoother::density(const std::vector<double>& grid) const {
  std::vector<double> v(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v[i] = density(grid[i]);
  return v;
}

std::vector<double> KernelSmoother::derivative(const std::vector<double>& grid) const {
  std::vector<double> v(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v[i] = derivative(grid[i]);
  return v;
}

double rule_of_thumb_bandwidth(const std::vector<double>& sample, int order) {
  if (sample.size() < 2) throw ValidationError("bandwidth: need at least two observations");
  double sd = std::sqrt(num::variance(sample));
  if (!(sd > 0.0)) throw ValidationError("bandwidth: degenerate sample with zero variance");
  return sd * std::pow(static_cast<double>(sample.size()), -1.0 / (2.0 * order + 1.0));
}

}  // namespace divrate
