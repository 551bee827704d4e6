#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "svp/denoiser.hpp"
#include "svp/manifest.hpp"
#include "svp/rng.hpp"

namespace svp::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("svp-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// A pool manifest with `per_class` real records per class and `gen_per_class`
// generated records per minority class. Paths are fictitious; build_split never
// opens them.
inline DatasetManifest synthetic_pool(std::size_t per_class, std::size_t gen_per_class, Provenance which) {
  DatasetManifest m;
  m.split_name = which == Provenance::kReal ? "real-pool" : "generated-pool";
  for (auto c : kAllClasses) {
    const bool gen = which == Provenance::kGenerated;
    if (gen && c == ParticleClass::kProtein) continue;
    const std::size_t n = gen ? gen_per_class : per_class;
    for (std::size_t i = 0; i < n; ++i)
      m.records.push_back({std::string(to_string(which)) + "/" + std::string(to_string(c)) + "/" + std::to_string(i) +
                               ".png",
                           c, which});
  }
  return m;
}

// ---------------------------------------------------------------- gradient check

struct GradCheckResult {
  std::size_t checked = 0;
  double worst_rel = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// f(theta) = <upstream, net(x, t)>, evaluated in 64-bit.
inline double probe(const DenoiserNet<double>& net, const Tensor<double>& x, const std::vector<int>& t,
                    const Tensor<double>& upstream) {
  const auto y = net.predict(x, t);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * upstream[i];
  return s;
}

// Central difference with Richardson extrapolation:
// (8 [f(+h) - f(-h)] - [f(+2h) - f(-2h)]) / (12 h).
inline double central_difference(DenoiserNet<double>& net, std::size_t p, std::size_t i, double h,
                                 const Tensor<double>& x, const std::vector<int>& t, const Tensor<double>& u) {
  double& theta = net.parameters()[p].value[i];
  const double saved = theta;
  auto at = [&](double offset) {
    theta = saved + offset;
    return probe(net, x, t, u);
  };
  const double d1 = at(h) - at(-h);
  const double d2 = at(2 * h) - at(-2 * h);
  theta = saved;
  return (8.0 * d1 - d2) / (12.0 * h);
}

// RMS magnitude of a parameter tensor, 1 for all-zero tensors.
inline double tensor_scale(const Tensor<double>& value) {
  double ss = 0.0;
  for (double v : value.values()) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(value.size()));
  return rms > 0.0 ? rms : 1.0;
}

// No single step suits every entry: large steps pick up curvature (weight
// standardization makes it ~1/scale), small ones pick up evaluation roundoff
// (~1e-12 in f). The stencil is evaluated at h = scale * {1e-1 .. 1e-3} and
// the mean of the adjacent pair that agrees best is returned.
inline double numeric_gradient(DenoiserNet<double>& net, std::size_t p, std::size_t i, const Tensor<double>& x,
                               const std::vector<int>& t, const Tensor<double>& u) {
  const double scale = tensor_scale(net.parameters()[p].value);
  const double factors[] = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3};
  double d[5];
  for (int k = 0; k < 5; ++k) d[k] = central_difference(net, p, i, factors[k] * scale, x, t, u);
  int best = 0;
  for (int k = 1; k < 4; ++k)
    if (std::abs(d[k] - d[k + 1]) < std::abs(d[best] - d[best + 1])) best = k;
  return 0.5 * (d[best] + d[best + 1]);
}

// The positions checked: one random entry of every parameter tensor plus
// `extra` entries drawn uniformly over all scalars.
inline std::vector<std::pair<std::size_t, std::size_t>> gradient_probe_positions(const ParameterSet<double>& params,
                                                                                 std::size_t extra,
                                                                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t p = 0; p < params.size(); ++p)
    out.emplace_back(p, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(params[p].value.size()) - 1)));
  const std::size_t total = params.scalar_count();
  for (std::size_t k = 0; k < extra; ++k) {
    std::size_t flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (flat < params[p].value.size()) {
        out.emplace_back(p, flat);
        break;
      }
      flat -= params[p].value.size();
    }
  }
  return out;
}

// Tiny-config net in 64-bit with the output head re-drawn at full scale, so
// gradients reaching inner layers are not damped by the small head init.
inline DenoiserNet<double> gradient_test_net(std::uint64_t seed) {
  DenoiserNet<double> net(DenoiserConfig::tiny_preset(), seed);
  Rng rng(derive_seed(seed, "gradcheck/head"));
  for (auto& p : net.parameters()) {
    if (p.name.rfind("final.head.", 0) != 0) continue;
    const std::size_t fan_in = p.name == "final.head.weight" ? p.value.size() / p.value.dim(0) : p.value.size();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.value.values()) v = rng.uniform(-bound, bound);
  }
  return net;
}

// Relative error |a - n| / max(|a|, |n|, floor). `floor` keeps exactly-zero
// gradients (shift-invariant softmax inputs) from dividing by rounding noise.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Analytic gradients of `net` (64-bit) or of its 32-bit cast versus 64-bit
// central differences of the same (cast-back) parameter values.
template <typename T>
GradCheckResult check_denoiser_gradients(std::uint64_t seed, std::size_t extra_positions, double floor_fraction) {
  DenoiserNet<double> reference = gradient_test_net(seed);
  const auto& cfg = reference.config();
  Rng rng(derive_seed(seed, "gradcheck/inputs"));
  const Shape shape{2, cfg.in_channels, cfg.image_size, cfg.image_size};
  Tensor<double> x = random_tensor<double>(shape, rng);
  Tensor<double> u = random_tensor<double>(shape, rng);
  const std::vector<int> t{37, 812};

  // Route everything through T so the 64-bit FD sees exactly the values the
  // analytic pass used.
  DenoiserNet<T> analytic_net = reference.template cast<T>();
  DenoiserNet<double> fd_net = analytic_net.template cast<double>();
  const Tensor<T> xt = x.template cast<T>();
  const Tensor<T> ut = u.template cast<T>();
  x = xt.template cast<double>();
  u = ut.template cast<double>();

  auto state = analytic_net.forward(xt, t);
  const auto grads = analytic_net.backward(state, ut);

  const auto positions = gradient_probe_positions(fd_net.parameters(), extra_positions, derive_seed(seed, "gradcheck/pos"));
  std::vector<double> numeric(positions.size());
  double largest = 0.0;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const auto [p, i] = positions[k];
    numeric[k] = numeric_gradient(fd_net, p, i, x, t, u);
    largest = std::max(largest, std::abs(numeric[k]));
  }
  GradCheckResult r;
  const double floor = floor_fraction * largest;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const auto [p, i] = positions[k];
    const double a = static_cast<double>(grads[p][i]);
    const double rel = relative_error(a, numeric[k], floor);
    ++r.checked;
    if (rel > r.worst_rel || r.worst_name.empty()) {
      r.worst_rel = rel;
      r.worst_name = fd_net.parameters()[p].name;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric[k];
    }
  }
  return r;
}

}  // namespace svp::testing
