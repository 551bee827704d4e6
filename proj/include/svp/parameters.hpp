#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "svp/autodiff.hpp"
#include "svp/rng.hpp"
#include "svp/tensor.hpp"

namespace svp {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

// Named parameter arrays of a network, in registration order.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    items_.push_back({std::move(name), std::move(value)});
    return items_.size() - 1;
  }

  std::size_t size() const { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].name == name) return i;
    throw std::out_of_range("no parameter named '" + name + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  std::vector<const Tensor<T>*> pointers() const {
    std::vector<const Tensor<T>*> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(&p.value);
    return out;
  }

  ad::Var<T> leaf(ad::Tape<T>& tape, std::size_t i) const { return tape.parameter(items_[i].value, i); }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (items_[i].name != other[i].name || items_[i].value.shape() != other[i].value.shape())
        return false;
    }
    return true;
  }

 private:
  std::vector<Parameter<T>> items_;
};

// Shape and initializer of one parameter; networks describe themselves with
// these so float and double instances draw identical initial values.
struct ParameterSpec {
  enum class Init { kUniformFanIn, kOnes, kZeros };
  std::string name;
  Shape shape;
  Init init = Init::kUniformFanIn;
  std::size_t fan_in = 1;
  double scale = 1.0;  // kUniformFanIn bound is scale / sqrt(fan_in)
};

template <typename T>
ParameterSet<T> materialize(const std::vector<ParameterSpec>& specs, std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<T> out;
  for (const auto& s : specs) {
    Tensor<T> t(s.shape);
    switch (s.init) {
      case ParameterSpec::Init::kOnes:
        t.fill(T(1));
        break;
      case ParameterSpec::Init::kZeros:
        break;
      case ParameterSpec::Init::kUniformFanIn: {
        const double bound = s.scale / std::sqrt(static_cast<double>(s.fan_in));
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    out.add(s.name, std::move(t));
  }
  return out;
}

double global_norm(const std::vector<Tensor<float>>& grads);
double global_norm(const std::vector<Tensor<double>>& grads);

}  // namespace svp
