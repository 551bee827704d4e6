#include "svp/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "svp/ops.hpp"

namespace svp {

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("denoiser config: " + msg); };
  if (channel_multipliers.empty()) fail("channel_multipliers must not be empty");
  if (base_channels == 0 || groups == 0) fail("base_channels and groups must be positive");
  if (base_channels % groups != 0) {
    fail("base_channels " + std::to_string(base_channels) + " not divisible by groups " +
         std::to_string(groups));
  }
  for (std::size_t m : channel_multipliers)
    if (m == 0) fail("channel multipliers must be positive");
  const std::size_t factor = std::size_t{1} << (channel_multipliers.size() - 1);
  if (image_size == 0 || image_size % factor != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by 2^(levels-1) = " +
         std::to_string(factor));
  }
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
  if (in_channels == 0) fail("in_channels must be positive");
  if (heads == 0) fail("heads must be positive");
  for (std::size_t m : channel_multipliers) {
    if ((base_channels * m) % heads != 0) fail("attention heads must divide every level width");
  }
  for (std::size_t r : self_attention_resolutions) {
    if (linear_attention_resolutions.count(r)) {
      fail("resolution " + std::to_string(r) + " listed for both self and linear attention");
    }
  }
}

DenoiserConfig DenoiserConfig::default_preset() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::tiny_preset() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.self_attention_resolutions = {8};
  c.linear_attention_resolutions = {16};
  c.groups = 4;
  c.time_embed_dim = 32;
  c.image_size = 16;
  return c;
}

DenoiserConfig DenoiserConfig::from_preset(const std::string& name) {
  if (name == "default") return default_preset();
  if (name == "tiny") return tiny_preset();
  throw std::invalid_argument("unknown denoiser preset '" + name + "' (valid: default, tiny)");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"channel_multipliers", c.channel_multipliers},
                     {"self_attention_resolutions", c.self_attention_resolutions},
                     {"linear_attention_resolutions", c.linear_attention_resolutions},
                     {"groups", c.groups},
                     {"time_embed_dim", c.time_embed_dim},
                     {"in_channels", c.in_channels},
                     {"image_size", c.image_size},
                     {"heads", c.heads}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  j.at("base_channels").get_to(c.base_channels);
  j.at("channel_multipliers").get_to(c.channel_multipliers);
  j.at("self_attention_resolutions").get_to(c.self_attention_resolutions);
  j.at("linear_attention_resolutions").get_to(c.linear_attention_resolutions);
  j.at("groups").get_to(c.groups);
  j.at("time_embed_dim").get_to(c.time_embed_dim);
  j.at("in_channels").get_to(c.in_channels);
  j.at("image_size").get_to(c.image_size);
  j.at("heads").get_to(c.heads);
}

std::vector<double> time_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    throw std::invalid_argument("time_embedding: dim must be even and positive, got " + std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[i] = std::sin(t * omega);
    out[half + i] = std::cos(t * omega);
  }
  return out;
}

namespace detail {

struct ConvLayer {
  std::size_t weight = 0, bias = 0;
  std::size_t stride = 1, pad = 1;
  bool standardized = true;
};
struct NormLayer {
  std::size_t gamma = 0, beta = 0;
};
struct LinearLayer {
  std::size_t weight = 0, bias = 0;
};
struct ResBlock {
  ConvLayer conv1, conv2;
  NormLayer norm1, norm2;
  LinearLayer time;
  bool has_skip = false;
  ConvLayer skip;
};
enum class AttentionKind { kNone, kSelf, kLinear };
struct AttentionBlock {
  AttentionKind kind = AttentionKind::kNone;
  NormLayer norm;
  ConvLayer q, k, v, out;
};
struct Level {
  ResBlock res;
  AttentionBlock attn;
  bool has_resample = false;
  ConvLayer resample;
};

struct DenoiserLayout {
  std::vector<ParameterSpec> specs;
  LinearLayer time1, time2;
  ConvLayer stem;
  std::vector<Level> down;
  ResBlock mid1, mid2;
  AttentionBlock mid_attn;
  std::vector<Level> up;  // execution order, deepest level first
  ResBlock final_res;      // over concat(up output, stem output)
  ConvLayer head;
};

namespace {

constexpr double kHeadInitScale = 1e-2;

class LayoutBuilder {
 public:
  explicit LayoutBuilder(const DenoiserConfig& c) : cfg_(c) {}

  std::size_t add(std::string name, Shape shape, ParameterSpec::Init init, std::size_t fan_in) {
    layout_.specs.push_back({std::move(name), std::move(shape), init, fan_in});
    return layout_.specs.size() - 1;
  }

  ConvLayer conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel,
                 std::size_t stride, bool standardized) {
    ConvLayer c;
    const std::size_t fan_in = cin * kernel * kernel;
    c.weight = add(name + ".weight", {cout, cin, kernel, kernel}, ParameterSpec::Init::kUniformFanIn, fan_in);
    c.bias = add(name + ".bias", {cout}, ParameterSpec::Init::kUniformFanIn, fan_in);
    c.stride = stride;
    c.pad = kernel / 2;
    c.standardized = standardized;
    return c;
  }

  NormLayer norm(const std::string& name, std::size_t channels) {
    return {add(name + ".gamma", {channels}, ParameterSpec::Init::kOnes, 1),
            add(name + ".beta", {channels}, ParameterSpec::Init::kZeros, 1)};
  }

  LinearLayer linear(const std::string& name, std::size_t in, std::size_t out) {
    return {add(name + ".weight", {out, in}, ParameterSpec::Init::kUniformFanIn, in),
            add(name + ".bias", {out}, ParameterSpec::Init::kUniformFanIn, in)};
  }

  ResBlock res(const std::string& name, std::size_t cin, std::size_t cout) {
    ResBlock b;
    b.conv1 = conv(name + ".conv1", cin, cout, 3, 1, true);
    b.norm1 = norm(name + ".norm1", cout);
    b.time = linear(name + ".time", cfg_.time_embed_dim, 2 * cout);
    b.conv2 = conv(name + ".conv2", cout, cout, 3, 1, true);
    b.norm2 = norm(name + ".norm2", cout);
    if (cin != cout) {
      b.has_skip = true;
      b.skip = conv(name + ".skip", cin, cout, 1, 1, false);
    }
    return b;
  }

  AttentionBlock attention(const std::string& name, std::size_t channels, std::size_t resolution,
                           bool force_self = false) {
    AttentionBlock a;
    if (force_self || cfg_.self_attention_resolutions.count(resolution)) {
      a.kind = AttentionKind::kSelf;
    } else if (cfg_.linear_attention_resolutions.count(resolution)) {
      a.kind = AttentionKind::kLinear;
    } else {
      return a;
    }
    a.norm = norm(name + ".norm", channels);
    a.q = conv(name + ".q", channels, channels, 1, 1, false);
    a.k = conv(name + ".k", channels, channels, 1, 1, false);
    a.v = conv(name + ".v", channels, channels, 1, 1, false);
    a.out = conv(name + ".out", channels, channels, 1, 1, false);
    return a;
  }

  DenoiserLayout build() {
    const auto& c = cfg_;
    const std::size_t td = c.time_embed_dim;
    layout_.time1 = linear("time.0", td, td);
    layout_.time2 = linear("time.1", td, td);
    layout_.stem = conv("stem", c.in_channels, c.base_channels, 3, 1, true);

    const std::size_t levels = c.channel_multipliers.size();
    std::vector<std::size_t> width(levels);
    for (std::size_t i = 0; i < levels; ++i) width[i] = c.base_channels * c.channel_multipliers[i];

    std::size_t prev = c.base_channels;
    for (std::size_t i = 0; i < levels; ++i) {
      const std::string name = "down." + std::to_string(i);
      const std::size_t res_px = c.image_size >> i;
      Level lv;
      lv.res = res(name + ".res", prev, width[i]);
      lv.attn = attention(name + ".attn", width[i], res_px);
      if (i + 1 < levels) {
        lv.has_resample = true;
        lv.resample = conv(name + ".downsample", width[i], width[i], 3, 2, true);
      }
      layout_.down.push_back(lv);
      prev = width[i];
    }

    const std::size_t deepest = width.back();
    layout_.mid1 = res("mid.res1", deepest, deepest);
    layout_.mid_attn = attention("mid.attn", deepest, c.image_size >> (levels - 1), true);
    layout_.mid2 = res("mid.res2", deepest, deepest);

    for (std::size_t i = levels; i-- > 0;) {
      const std::string name = "up." + std::to_string(i);
      const std::size_t res_px = c.image_size >> i;
      Level lv;
      lv.res = res(name + ".res", 2 * width[i], width[i]);
      lv.attn = attention(name + ".attn", width[i], res_px);
      if (i > 0) {
        lv.has_resample = true;
        lv.resample = conv(name + ".upsample", width[i], width[i - 1], 3, 1, true);
      }
      layout_.up.push_back(lv);
    }

    layout_.final_res = res("final.res", width[0] + c.base_channels, c.base_channels);
    layout_.head = conv("final.head", c.base_channels, c.in_channels, 1, 1, false);
    // Near-zero output at initialization keeps untrained reverse chains bounded.
    layout_.specs[layout_.head.weight].scale = kHeadInitScale;
    layout_.specs[layout_.head.bias].scale = kHeadInitScale;
    return std::move(layout_);
  }

 private:
  const DenoiserConfig& cfg_;
  DenoiserLayout layout_;
};

template <typename T>
class Runner {
 public:
  Runner(const DenoiserConfig& c, const DenoiserLayout& l, const ParameterSet<T>& p, ad::Tape<T>& tape)
      : cfg_(c), layout_(l), params_(p), tape_(tape) {}

  ad::Var<T> run(const Tensor<T>& x, std::span<const int> t) {
    const auto& L = layout_;
    const std::size_t n = x.dim(0);
    const std::size_t td = cfg_.time_embed_dim;
    Tensor<T> emb({n, td});
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = time_embedding(static_cast<double>(t[i]), td);
      for (std::size_t j = 0; j < td; ++j) emb[i * td + j] = static_cast<T>(e[j]);
    }
    ad::Var<T> temb = tape_.input(std::move(emb));
    temb = lin(L.time2, ad::silu(lin(L.time1, temb)));
    const ad::Var<T> temb_act = ad::silu(temb);

    const ad::Var<T> stem = conv(L.stem, tape_.input(x));
    ad::Var<T> h = stem;
    std::vector<ad::Var<T>> skips;
    for (const auto& lv : L.down) {
      h = res(lv.res, h, temb_act);
      h = attn(lv.attn, h);
      skips.push_back(h);
      if (lv.has_resample) h = conv(lv.resample, h);
    }
    h = res(L.mid1, h, temb_act);
    h = attn(L.mid_attn, h);
    h = res(L.mid2, h, temb_act);
    for (const auto& lv : L.up) {
      h = ad::concat_channels(h, skips.back());
      skips.pop_back();
      h = res(lv.res, h, temb_act);
      h = attn(lv.attn, h);
      if (lv.has_resample) h = conv(lv.resample, ad::upsample_nearest2x(h));
    }
    h = res(L.final_res, ad::concat_channels(h, stem), temb_act);
    return conv(L.head, h);
  }

 private:
  ad::Var<T> p(std::size_t i) { return params_.leaf(tape_, i); }

  ad::Var<T> conv(const ConvLayer& c, ad::Var<T> x) {
    ad::Var<T> w = p(c.weight);
    if (c.standardized) w = ad::weight_standardize(w, 1e-5);
    return ad::conv2d(x, w, std::optional<ad::Var<T>>(p(c.bias)), c.stride, c.pad);
  }

  ad::Var<T> norm(const NormLayer& nl, ad::Var<T> x) {
    return ad::group_norm(x, p(nl.gamma), p(nl.beta), cfg_.groups);
  }

  ad::Var<T> lin(const LinearLayer& l, ad::Var<T> x) {
    return ad::linear(x, p(l.weight), std::optional<ad::Var<T>>(p(l.bias)));
  }

  ad::Var<T> res(const ResBlock& b, ad::Var<T> x, ad::Var<T> temb_act) {
    ad::Var<T> h = norm(b.norm1, conv(b.conv1, x));
    h = ad::silu(ad::scale_shift(h, lin(b.time, temb_act)));
    h = ad::silu(norm(b.norm2, conv(b.conv2, h)));
    return ad::add(h, b.has_skip ? conv(b.skip, x) : x);
  }

  ad::Var<T> attn(const AttentionBlock& a, ad::Var<T> x) {
    if (a.kind == AttentionKind::kNone) return x;
    const ad::Var<T> normed = norm(a.norm, x);
    const ad::Var<T> q = conv(a.q, normed), k = conv(a.k, normed), v = conv(a.v, normed);
    const ad::Var<T> mixed = a.kind == AttentionKind::kSelf ? ad::self_attention(q, k, v, cfg_.heads)
                                                            : ad::linear_attention(q, k, v, cfg_.heads);
    return ad::add(x, conv(a.out, mixed));
  }

  const DenoiserConfig& cfg_;
  const DenoiserLayout& layout_;
  const ParameterSet<T>& params_;
  ad::Tape<T>& tape_;
};

}  // namespace
}  // namespace detail

template <typename T>
DenoiserNet<T>::DenoiserNet(DenoiserConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  layout_ = std::make_shared<const detail::DenoiserLayout>(detail::LayoutBuilder(config_).build());
  params_ = materialize<T>(layout_->specs, seed);
}

template <typename T>
DenoiserNet<T>::DenoiserNet(DenoiserConfig config, std::shared_ptr<const detail::DenoiserLayout> layout,
                            ParameterSet<T> params)
    : config_(std::move(config)), layout_(std::move(layout)), params_(std::move(params)) {}

template <typename T>
void DenoiserNet<T>::load_parameters(const ParameterSet<T>& values) {
  if (!params_.same_layout(values)) {
    throw std::invalid_argument("denoiser: parameter layout does not match configuration");
  }
  params_ = values;
}

template <typename T>
typename DenoiserNet<T>::ForwardState DenoiserNet<T>::forward(const Tensor<T>& x, std::span<const int> t,
                                                              bool record_gradients) const {
  const auto& c = config_;
  if (x.rank() != 4 || x.dim(1) != c.in_channels || x.dim(2) != c.image_size || x.dim(3) != c.image_size) {
    throw std::invalid_argument("denoiser: input " + shape_str(x.shape()) + " does not match config (" +
                                std::to_string(c.in_channels) + " x " + std::to_string(c.image_size) +
                                " x " + std::to_string(c.image_size) + ")");
  }
  if (t.size() != x.dim(0)) throw std::invalid_argument("denoiser: need one timestep per sample");
  for (int step : t)
    if (step < 1) throw std::invalid_argument("denoiser: timestep " + std::to_string(step) + " < 1");
  ForwardState state{ad::Tape<T>(record_gradients), {}, false};
  detail::Runner<T> runner(config_, *layout_, params_, state.tape);
  state.output = runner.run(x, t);
  state.valid = true;
  return state;
}

template <typename T>
Tensor<T> DenoiserNet<T>::predict(const Tensor<T>& x, std::span<const int> t) const {
  ForwardState s = forward(x, t, false);
  return s.tape.value(s.output.id);
}

template <typename T>
std::vector<Tensor<T>> DenoiserNet<T>::backward(ForwardState& state, const Tensor<T>& upstream) const {
  if (!state.valid || !state.tape.grad_enabled() || state.tape.backward_done()) {
    throw std::logic_error("denoiser backward: missing forward state");
  }
  // ForwardState may have been moved; re-point the output handle at its tape.
  state.output.tape = &state.tape;
  state.tape.backward(state.output, upstream);
  state.valid = false;
  return state.tape.parameter_gradients(params_.pointers());
}

template class DenoiserNet<float>;
template class DenoiserNet<double>;

}  // namespace svp
