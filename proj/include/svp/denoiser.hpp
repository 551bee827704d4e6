#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "svp/autodiff.hpp"
#include "svp/parameters.hpp"

namespace svp {

// U-Net noise predictor configuration. Resolutions are spatial edge lengths
// (64 = full resolution for the default preset).
struct DenoiserConfig {
  std::size_t base_channels = 64;
  std::vector<std::size_t> channel_multipliers{1, 2, 4, 8};
  std::set<std::size_t> self_attention_resolutions{8};
  std::set<std::size_t> linear_attention_resolutions{32, 16};
  std::size_t groups = 8;
  std::size_t time_embed_dim = 256;
  std::size_t in_channels = 3;
  std::size_t image_size = 64;
  std::size_t heads = 1;

  void validate() const;

  static DenoiserConfig default_preset();
  // base 8, multipliers [1, 2], 16 x 16 inputs. For gradient checks and desk runs.
  static DenoiserConfig tiny_preset();
  static DenoiserConfig from_preset(const std::string& name);

  bool operator==(const DenoiserConfig&) const = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Sinusoidal embedding concat(sin(t w_i), cos(t w_i)), w_i = 10000^(-2i/dim).
std::vector<double> time_embedding(double t, std::size_t dim);

namespace detail {
struct DenoiserLayout;
}

template <typename T>
class DenoiserNet {
 public:
  // Forward-pass record needed by backward(). Owned by the caller; refers to
  // the net's parameter storage, so the net must outlive it.
  struct ForwardState {
    ad::Tape<T> tape;
    ad::Var<T> output;
    bool valid = false;

    // Use this rather than output.value(): the state may have been moved.
    const Tensor<T>& output_value() const { return tape.value(output.id); }
  };

  DenoiserNet(DenoiserConfig config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  // x: N x in_channels x image_size x image_size (model range); t in 1..T per sample.
  ForwardState forward(const Tensor<T>& x, std::span<const int> t, bool record_gradients = true) const;
  Tensor<T> predict(const Tensor<T>& x, std::span<const int> t) const;

  // Parameter gradients of <upstream, output>. Throws std::logic_error when the
  // state holds no forward pass or has already been consumed.
  std::vector<Tensor<T>> backward(ForwardState& state, const Tensor<T>& upstream) const;

  template <typename U>
  DenoiserNet<U> cast() const;

  // Replaces all parameter values; layout must match.
  void load_parameters(const ParameterSet<T>& values);

 private:
  template <typename>
  friend class DenoiserNet;
  DenoiserNet(DenoiserConfig config, std::shared_ptr<const detail::DenoiserLayout> layout,
              ParameterSet<T> params);

  DenoiserConfig config_;
  std::shared_ptr<const detail::DenoiserLayout> layout_;
  ParameterSet<T> params_;
};

template <typename T>
template <typename U>
DenoiserNet<U> DenoiserNet<T>::cast() const {
  return DenoiserNet<U>(config_, layout_, params_.template cast<U>());
}

extern template class DenoiserNet<float>;
extern template class DenoiserNet<double>;

}  // namespace svp
