#include "svp/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace svp {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("linear_schedule: require 0 < beta_start <= beta_end < 1, got " +
                                std::to_string(beta_start) + ", " + std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.steps_ = steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  const auto n = static_cast<std::size_t>(steps) + 1;
  s.beta_.assign(n, 0.0);
  s.alpha_.assign(n, 1.0);
  s.alpha_bar_.assign(n, 1.0);
  s.posterior_var_.assign(n, 0.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    const double b = beta_start + frac * (beta_end - beta_start);
    const auto i = static_cast<std::size_t>(t);
    s.beta_[i] = b;
    s.alpha_[i] = 1.0 - b;
    s.alpha_bar_[i] = s.alpha_bar_[i - 1] * s.alpha_[i];
    s.posterior_var_[i] = b * (1.0 - s.alpha_bar_[i - 1]) / (1.0 - s.alpha_bar_[i]);
  }
  return s;
}

std::size_t NoiseSchedule::checked(int t, int lowest) const {
  if (t < lowest || t > steps_) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lowest) +
                            ", " + std::to_string(steps_) + "]");
  }
  return static_cast<std::size_t>(t);
}

PosteriorCoefficients NoiseSchedule::posterior_coeffs(int t) const {
  const std::size_t i = checked(t, 1);
  const double ab = alpha_bar_[i];
  const double ab_prev = alpha_bar_[i - 1];
  PosteriorCoefficients c;
  c.c_x0 = std::sqrt(ab_prev) * beta_[i] / (1.0 - ab);
  c.c_xt = std::sqrt(alpha_[i]) * (1.0 - ab_prev) / (1.0 - ab);
  c.variance = posterior_var_[i];
  return c;
}

template <typename T>
Tensor<T> NoiseSchedule::q_sample(const Tensor<T>& x0, std::span<const int> t,
                                  const Tensor<T>& eps) const {
  require_same_shape(x0, eps, "q_sample");
  if (x0.rank() == 0 || t.size() != x0.dim(0)) {
    throw std::invalid_argument("q_sample: need one timestep per sample");
  }
  const std::size_t per = x0.size() / x0.dim(0);
  Tensor<T> out(x0.shape());
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double ab = alpha_bar_[checked(t[n], 1)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
    }
  }
  return out;
}

template Tensor<float> NoiseSchedule::q_sample(const Tensor<float>&, std::span<const int>,
                                               const Tensor<float>&) const;
template Tensor<double> NoiseSchedule::q_sample(const Tensor<double>&, std::span<const int>,
                                                const Tensor<double>&) const;

}  // namespace svp
