#include "svp/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace svp {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "Adam" : "AdamW";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "Adam" || name == "adam") return OptimizerKind::kAdam;
  if (name == "AdamW" || name == "adamw") return OptimizerKind::kAdamW;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected Adam or AdamW)");
}

template <typename T>
AdamOptimizer<T>::AdamOptimizer(const ParameterSet<T>& params, AdamOptions options)
    : options_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

template <typename T>
void AdamOptimizer<T>::step(ParameterSet<T>& params, const std::vector<Tensor<T>>& grads) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw std::invalid_argument("AdamOptimizer::step: gradient count does not match parameters");
  }
  ++steps_;
  const double lr = options_.learning_rate;
  const double wd = options_.weight_decay;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  const bool decoupled = options_.kind == OptimizerKind::kAdamW;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    const auto& g = grads[i];
    require_same_shape(w, g, "AdamOptimizer::step");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double grad = g[j];
      if (!decoupled && wd != 0.0) grad += wd * w[j];
      m[j] = static_cast<T>(options_.beta1 * m[j] + (1.0 - options_.beta1) * grad);
      v[j] = static_cast<T>(options_.beta2 * v[j] + (1.0 - options_.beta2) * grad * grad);
      if (lr == 0.0) continue;
      double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + options_.eps);
      if (decoupled) update += wd * w[j];
      w[j] = static_cast<T>(w[j] - lr * update);
    }
  }
}

template <typename T>
void EmaShadow<T>::update(const ParameterSet<T>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& s = shadow_[i].value;
    const auto& p = params[i].value;
    if (decay_ == 0.0) {
      s = p;
      continue;
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = static_cast<T>(decay_ * s[j] + (1.0 - decay_) * p[j]);
    }
  }
}

template <typename T>
double global_norm_impl(const std::vector<Tensor<T>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (T v : g.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

double global_norm(const std::vector<Tensor<float>>& grads) { return global_norm_impl(grads); }
double global_norm(const std::vector<Tensor<double>>& grads) { return global_norm_impl(grads); }

template class AdamOptimizer<float>;
template class AdamOptimizer<double>;
template class EmaShadow<float>;
template class EmaShadow<double>;

}  // namespace svp
