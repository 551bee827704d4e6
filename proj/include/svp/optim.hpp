#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "svp/parameters.hpp"

namespace svp {

enum class OptimizerKind { kAdam, kAdamW };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct AdamOptions {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with either coupled L2 (Adam) or decoupled (AdamW) weight decay.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterSet<T>& params, AdamOptions options);

  void step(ParameterSet<T>& params, const std::vector<Tensor<T>>& grads);

  const AdamOptions& options() const { return options_; }
  long long step_count() const { return steps_; }

  // Moment buffers, exposed for checkpointing.
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_step_count(long long s) { steps_ = s; }

 private:
  AdamOptions options_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  long long steps_ = 0;
};

// Exponential moving average of parameters: shadow = d * shadow + (1 - d) * p.
template <typename T>
class EmaShadow {
 public:
  EmaShadow(const ParameterSet<T>& params, double decay) : shadow_(params), decay_(decay) {}

  void update(const ParameterSet<T>& params);
  const ParameterSet<T>& shadow() const { return shadow_; }
  ParameterSet<T>& shadow() { return shadow_; }
  double decay() const { return decay_; }

 private:
  ParameterSet<T> shadow_;
  double decay_;
};

}  // namespace svp
