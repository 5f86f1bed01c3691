#pragma once

#include <optional>
#include <vector>

#include "divrate/core.hpp"

namespace divrate {

//! Weighted kernel smoother with optional local-linear correction at a lower support bound.
class KernelSmoother {
 public:
  KernelSmoother(std::vector<double> sample, std::vector<double> weights, KernelSpec K, double h,
                 std::optional<double> lower_bound = std::nullopt);

  //! Normalized density estimate (weights sum to one).
  double density(double a) const;
  double derivative(double a) const;
  //! Weighted fraction of sample points >= a.
  double survival(double a) const;

  double bandwidth() const { return h_; }
  double total_weight() const { return total_; }
  std::size_t size() const { return x_.size(); }

  std::vector<double> density(const std::vector<double>& grid) const;
  std::vector<double> derivative(const std::vector<double>& grid) const;

 private:
  std::vector<double> x_, w_, cumw_;  // sorted sample, weights, prefix sums of weights
  KernelSpec K_;
  double h_;
  std::optional<double> lower_;
  double total_ = 0.0;

  double raw(double a, double p_limit) const;
};

//! Rule-of-thumb bandwidth sigma * n^{-1/(2*order+1)}.
double rule_of_thumb_bandwidth(const std::vector<double>& sample, int order);

}  // namespace divrate
