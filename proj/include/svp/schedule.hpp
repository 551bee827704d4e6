#pragma once

#include <span>
#include <vector>

#include "svp/tensor.hpp"

namespace svp {

struct PosteriorCoefficients {
  double c_x0 = 0.0;  // weight on x_0 in the posterior mean
  double c_xt = 0.0;  // weight on x_t in the posterior mean
  double variance = 0.0;
};

// Precomputed tables for a T-step noise schedule, indexed by timestep
// t = 1..T. Index 0 holds the boundary values (alpha_bar[0] = 1, beta[0] = 0).
// All tables are double precision regardless of network precision.
class NoiseSchedule {
 public:
  // beta[t] interpolated linearly from beta_start (t = 1) to beta_end (t = T).
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_.at(checked(t, 1)); }
  double alpha(int t) const { return alpha_.at(checked(t, 1)); }
  double alpha_bar(int t) const { return alpha_bar_.at(checked(t, 0)); }
  double posterior_variance(int t) const { return posterior_var_.at(checked(t, 1)); }

  // Coefficients of q(x_{t-1} | x_t, x_0).
  PosteriorCoefficients posterior_coeffs(int t) const;

  // sqrt(alpha_bar[t_n]) * x0 + sqrt(1 - alpha_bar[t_n]) * eps for each sample n.
  template <typename T>
  Tensor<T> q_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps) const;

 private:
  NoiseSchedule() = default;
  std::size_t checked(int t, int lowest) const;

  int steps_ = 0;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_var_;
};

}  // namespace svp
