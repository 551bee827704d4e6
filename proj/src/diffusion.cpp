#include "svp/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "svp/frechet.hpp"

namespace svp {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (ema_decay && (*ema_decay < 0.0 || *ema_decay >= 1.0))
    throw std::invalid_argument("train config: ema_decay must lie in [0, 1)");
  for (int e : snapshot_epochs)
    if (e < 1) throw std::invalid_argument("train config: snapshot epochs must be >= 1");
  if (fid_samples < 2) throw std::invalid_argument("train config: fid_samples must be >= 2");
  if (checkpoint_every < 0) throw std::invalid_argument("train config: checkpoint_every must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", std::string(to_string(c.optimizer))},
                     {"weight_decay", c.weight_decay},
                     {"ema_decay", c.ema_decay ? nlohmann::json(*c.ema_decay) : nlohmann::json(nullptr)},
                     {"seed", c.seed},
                     {"snapshot_epochs", c.snapshot_epochs},
                     {"reduction", c.reduction == ad::Reduction::kMean ? "mean" : "sum"},
                     {"variance", c.variance == SamplerVariance::kPosterior ? "posterior" : "beta"},
                     {"fid_samples", c.fid_samples},
                     {"extractor", c.extractor},
                     {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  j.at("weight_decay").get_to(c.weight_decay);
  if (j.at("ema_decay").is_null()) c.ema_decay.reset();
  else c.ema_decay = j.at("ema_decay").get<double>();
  j.at("seed").get_to(c.seed);
  j.at("snapshot_epochs").get_to(c.snapshot_epochs);
  c.reduction = j.at("reduction").get<std::string>() == "sum" ? ad::Reduction::kSum : ad::Reduction::kMean;
  c.variance = j.at("variance").get<std::string>() == "beta" ? SamplerVariance::kBeta : SamplerVariance::kPosterior;
  j.at("fid_samples").get_to(c.fid_samples);
  j.at("extractor").get_to(c.extractor);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
}

double l1_noise_loss(const Tensor<float>& eps_hat, const Tensor<float>& eps, ad::Reduction reduction) {
  require_same_shape(eps_hat, eps, "l1_noise_loss");
  double sum = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) sum += std::abs(static_cast<double>(eps_hat[i]) - eps[i]);
  if (reduction == ad::Reduction::kMean && eps.size() > 0) sum /= static_cast<double>(eps.size());
  return sum;
}

DiffusionTrainer::DiffusionTrainer(DenoiserNet<float>& net, const NoiseSchedule& schedule, const TrainConfig& cfg)
    : net_(net),
      schedule_(schedule),
      cfg_(cfg),
      optimizer_(net.parameters(), AdamOptions{cfg.optimizer, cfg.learning_rate, cfg.weight_decay}) {
  cfg_.validate();
  if (cfg_.ema_decay) ema_.emplace(net.parameters(), *cfg_.ema_decay);
}

const ParameterSet<float>& DiffusionTrainer::sampling_parameters() const {
  return ema_ ? ema_->shadow() : net_.parameters();
}

double DiffusionTrainer::train_step(const Tensor<float>& batch, Rng& rng) {
  const std::size_t n = batch.dim(0);
  const int steps = schedule_.steps();
  std::vector<int> t(n);
  for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(1, steps));
  Tensor<float> eps(batch.shape());
  for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
  const Tensor<float> xt = schedule_.q_sample(batch, std::span<const int>(t), eps);

  auto state = net_.forward(xt, t, true);
  const Tensor<float>& pred = state.output_value();
  const double loss = l1_noise_loss(pred, eps, cfg_.reduction);
  const float scale = cfg_.reduction == ad::Reduction::kMean ? 1.0f / static_cast<float>(eps.size()) : 1.0f;
  Tensor<float> upstream(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const float d = pred[i] - eps[i];
    upstream[i] = d > 0 ? scale : (d < 0 ? -scale : 0.0f);
  }
  const auto grads = net_.backward(state, upstream);
  const double gnorm = global_norm(grads);
  if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
    std::array<int, 10> hist{};
    for (int ti : t) hist[std::min<std::size_t>(9, static_cast<std::size_t>((ti - 1) * 10 / steps))]++;
    std::ostringstream msg;
    msg << "non-finite training loss at step " << optimizer_.step_count() + 1 << ": loss=" << loss
        << " grad_norm=" << gnorm << " t histogram (10 bins over 1.." << steps << "):";
    for (int h : hist) msg << ' ' << h;
    throw NonFiniteLossError(msg.str());
  }
  optimizer_.step(net_.parameters(), grads);
  if (ema_) ema_->update(net_.parameters());
  return loss;
}

NoisePredictor predictor_for(const DenoiserNet<float>& net) {
  return [&net](const Tensor<float>& x, std::span<const int> t) { return net.predict(x, t); };
}

namespace {

template <typename Noise>
Tensor<float> reverse_step(const NoisePredictor& predict, const NoiseSchedule& schedule, const Tensor<float>& x_t,
                           int t, SamplerVariance variance, Noise&& noise) {
  if (t < 1 || t > schedule.steps())
    throw std::out_of_range("p_sample_step: t=" + std::to_string(t) + " outside 1.." + std::to_string(schedule.steps()));
  const std::size_t n = x_t.dim(0);
  const std::vector<int> tv(n, t);
  const Tensor<float> eps = predict(x_t, tv);
  require_same_shape(eps, x_t, "p_sample_step prediction");

  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double sigma =
      std::sqrt(variance == SamplerVariance::kPosterior ? schedule.posterior_variance(t) : schedule.beta(t));
  Tensor<float> out(x_t.shape());
  const std::size_t per = x_t.size() / n;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
      double mean = inv_sqrt_alpha * (static_cast<double>(x_t[i]) - coef * eps[i]);
      if (t > 1) mean += sigma * noise(s);
      out[i] = static_cast<float>(mean);
    }
  }
  return out;
}

}  // namespace

Tensor<float> p_sample_step(const NoisePredictor& predict, const NoiseSchedule& schedule, const Tensor<float>& x_t,
                            int t, std::span<Rng> rngs, SamplerVariance variance) {
  if (rngs.size() != x_t.dim(0)) throw std::invalid_argument("p_sample_step: need one rng per sample");
  return reverse_step(predict, schedule, x_t, t, variance, [&](std::size_t s) { return rngs[s].normal(); });
}

Tensor<float> p_sample_step(const NoisePredictor& predict, const NoiseSchedule& schedule, const Tensor<float>& x_t,
                            int t, Rng& rng, SamplerVariance variance) {
  return reverse_step(predict, schedule, x_t, t, variance, [&](std::size_t) { return rng.normal(); });
}

std::vector<int> trajectory_steps(int steps, std::size_t count) {
  if (count == 0) return {};
  if (count == 1) return {0};
  std::vector<int> out;
  for (std::size_t k = 0; k < count; ++k) {
    const double frac = static_cast<double>(count - 1 - k) / static_cast<double>(count - 1);
    const int v = static_cast<int>(std::lround(frac * steps));
    if (out.empty() || v < out.back()) out.push_back(v);
  }
  return out;
}

SampleResult sample(const NoisePredictor& predict, const NoiseSchedule& schedule, std::size_t n,
                    const SampleOptions& opt) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  if (opt.batch < 1) throw std::invalid_argument("sample: batch must be >= 1");
  const int steps = schedule.steps();
  std::vector<int> snaps = opt.snapshot_steps;
  std::sort(snaps.begin(), snaps.end(), std::greater<>());
  snaps.erase(std::unique(snaps.begin(), snaps.end()), snaps.end());
  for (int s : snaps)
    if (s < 0 || s > steps) throw std::out_of_range("sample: snapshot step " + std::to_string(s) + " outside 0..T");

  const Shape shape{n, opt.channels, opt.size, opt.size};
  const std::size_t per = opt.channels * opt.size * opt.size;
  SampleResult result;
  result.trajectory.timesteps = snaps;
  for (std::size_t k = 0; k < snaps.size(); ++k)
    result.trajectory.snapshots.push_back({Tensor<float>(shape), ValueRange::kModel});
  Tensor<float> final_model(shape);

  auto store = [&](Tensor<float>& dst, const Tensor<float>& src, std::size_t start) {
    std::copy(src.data(), src.data() + src.size(), dst.data() + start * per);
  };
  auto maybe_snapshot = [&](int timestep, const Tensor<float>& x, std::size_t start) {
    for (std::size_t k = 0; k < snaps.size(); ++k)
      if (snaps[k] == timestep) store(result.trajectory.snapshots[k].data, x, start);
  };

  for (std::size_t start = 0; start < n; start += opt.batch) {
    const std::size_t count = std::min(opt.batch, n - start);
    std::vector<Rng> rngs;
    rngs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) rngs.emplace_back(derive_seed(opt.seed, static_cast<std::uint64_t>(start + i)));
    Tensor<float> x({count, opt.channels, opt.size, opt.size});
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < per; ++j) x[i * per + j] = static_cast<float>(rngs[i].normal());
    maybe_snapshot(steps, x, start);
    for (int t = steps; t >= 1; --t) {
      x = p_sample_step(predict, schedule, x, t, std::span<Rng>(rngs), opt.variance);
      if (t - 1 > 0) maybe_snapshot(t - 1, x, start);
    }
    for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
    maybe_snapshot(0, x, start);
    store(final_model, x, start);
  }
  result.trajectory.final = {std::move(final_model), ValueRange::kModel};
  result.images = from_model_range(result.trajectory.final);
  return result;
}

namespace {

std::string epoch_tag(int epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(5) << std::setfill('0') << epoch;
  return s.str();
}

nlohmann::json log_to_json(const TrainLog& log) {
  nlohmann::json e = nlohmann::json::array(), f = nlohmann::json::array();
  for (const auto& r : log.epochs) e.push_back({r.epoch, r.loss, r.seconds});
  for (const auto& r : log.fid) f.push_back({r.epoch, r.fid});
  return {{"epochs", e}, {"fid", f}};
}

TrainLog log_from_json(const nlohmann::json& j) {
  TrainLog log;
  for (const auto& r : j.at("epochs")) log.epochs.push_back({r[0].get<int>(), r[1].get<double>(), r[2].get<double>()});
  for (const auto& r : j.at("fid")) log.fid.push_back({r[0].get<int>(), r[1].get<double>()});
  return log;
}

void add_set(Checkpoint& ck, const std::string& prefix, const ParameterSet<float>& params) {
  for (const auto& p : params) ck.add(prefix + p.name, p.value);
}

void add_moments(Checkpoint& ck, const std::string& prefix, const ParameterSet<float>& params,
                 const std::vector<Tensor<float>>& moments) {
  for (std::size_t i = 0; i < params.size(); ++i) ck.add(prefix + params[i].name, moments[i]);
}

ParameterSet<float> read_set(const Checkpoint& ck, const std::string& prefix, const ParameterSet<float>& layout) {
  ParameterSet<float> out;
  for (const auto& p : layout) {
    const auto& t = ck.get(prefix + p.name);
    if (t.shape() != p.value.shape())
      throw CheckpointError("checkpoint tensor " + prefix + p.name + " has shape " + shape_str(t.shape()) +
                            ", expected " + shape_str(p.value.shape()));
    out.add(p.name, t);
  }
  return out;
}

}  // namespace

Checkpoint make_denoiser_checkpoint(const DenoiserNet<float>& net, const NoiseSchedule& schedule) {
  Checkpoint ck;
  ck.meta["kind"] = "denoiser";
  ck.meta["config"] = net.config();
  ck.meta["schedule"] = {{"steps", schedule.steps()},
                         {"beta_start", schedule.beta_start()},
                         {"beta_end", schedule.beta_end()}};
  add_set(ck, "param/", net.parameters());
  return ck;
}

LoadedDenoiser load_denoiser(const fs::path& path, bool prefer_ema) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.value("kind", "") != "denoiser")
    throw CheckpointError("checkpoint " + path.string() + " does not hold a denoiser");
  const auto cfg = ck.meta.at("config").get<DenoiserConfig>();
  const auto& sj = ck.meta.at("schedule");
  DenoiserNet<float> net(cfg, 0);
  const bool ema = prefer_ema && net.parameters().size() > 0 && ck.contains("ema/" + net.parameters()[0].name);
  net.load_parameters(read_set(ck, ema ? "ema/" : "param/", net.parameters()));
  return LoadedDenoiser{std::move(net),
                        NoiseSchedule::linear(sj.at("steps").get<int>(), sj.at("beta_start").get<double>(),
                                              sj.at("beta_end").get<double>()),
                        ck.meta};
}

void write_train_log(const fs::path& run_dir, const TrainLog& log) {
  {
    std::ofstream out(run_dir / "train_log.csv", std::ios::trunc);
    out << "epoch,loss,seconds\n" << std::setprecision(10);
    for (const auto& r : log.epochs) out << r.epoch << ',' << r.loss << ',' << r.seconds << '\n';
  }
  std::ofstream out(run_dir / "fid_checkpoints.csv", std::ios::trunc);
  out << "epoch,fid\n" << std::setprecision(10);
  for (const auto& r : log.fid) out << r.epoch << ',' << r.fid << '\n';
}

TrainResult train(DenoiserNet<float>& net, const NoiseSchedule& schedule, const ImageTensor& images,
                  const TrainConfig& cfg, const fs::path& run_dir, const TrainRunOptions& options) {
  cfg.validate();
  const auto& nc = net.config();
  if (images.range != ValueRange::kModel) throw std::invalid_argument("train: images must be in model range");
  if (images.count() == 0) throw std::invalid_argument("train: empty training set");
  if (images.data.dim(1) != nc.in_channels || images.data.dim(2) != nc.image_size || images.data.dim(3) != nc.image_size)
    throw std::invalid_argument("train: images " + shape_str(images.data.shape()) + " do not match the denoiser config");
  const std::set<int> snapshot_set(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end());
  if (!snapshot_set.empty() && images.count() < 2)
    throw std::invalid_argument("train: FID snapshots need at least 2 training images");

  fs::create_directories(run_dir / "checkpoints");
  fs::create_directories(run_dir / "snapshots");
  const fs::path latest = run_dir / "checkpoints" / "latest.svpckpt";

  DiffusionTrainer trainer(net, schedule, cfg);
  TrainLog log;
  int start_epoch = 1;
  if (options.resume) {
    if (!fs::exists(latest)) throw std::runtime_error("resume: no checkpoint at " + latest.string());
    const Checkpoint ck = read_checkpoint(latest);
    if (ck.meta.at("config").get<DenoiserConfig>() != nc)
      throw std::runtime_error("resume: checkpoint denoiser config differs from the requested one");
    net.load_parameters(read_set(ck, "param/", net.parameters()));
    auto& m = trainer.optimizer().first_moments();
    auto& v = trainer.optimizer().second_moments();
    for (std::size_t i = 0; i < net.parameters().size(); ++i) {
      m[i] = ck.get("adam.m/" + net.parameters()[i].name);
      v[i] = ck.get("adam.v/" + net.parameters()[i].name);
    }
    trainer.optimizer().set_step_count(ck.meta.at("step").get<long long>());
    if (trainer.ema()) {
      if (ck.contains("ema/" + net.parameters()[0].name))
        trainer.ema()->shadow() = read_set(ck, "ema/", net.parameters());
      else
        trainer.ema()->shadow() = net.parameters();
    }
    log = log_from_json(ck.meta.at("train_log"));
    start_epoch = ck.meta.at("epoch").get<int>() + 1;
  }

  const ImageTensor train_unit = from_model_range(images);
  const std::unique_ptr<FeatureExtractor> extractor =
      snapshot_set.empty() ? nullptr : make_extractor(cfg.extractor);

  auto save_state = [&](int epoch, bool tagged) {
    Checkpoint ck = make_denoiser_checkpoint(net, schedule);
    ck.meta["step"] = trainer.step_count();
    ck.meta["epoch"] = epoch;
    ck.meta["train_config"] = cfg;
    ck.meta["train_log"] = log_to_json(log);
    for (const auto& [key, value] : options.extra_meta.items()) ck.meta[key] = value;
    if (trainer.ema()) add_set(ck, "ema/", trainer.ema()->shadow());
    add_moments(ck, "adam.m/", net.parameters(), trainer.optimizer().first_moments());
    add_moments(ck, "adam.v/", net.parameters(), trainer.optimizer().second_moments());
    write_checkpoint(latest, ck);
    if (tagged) fs::copy_file(latest, run_dir / "checkpoints" / (epoch_tag(epoch) + ".svpckpt"),
                              fs::copy_options::overwrite_existing);
  };

  const std::size_t n = images.count();
  const std::size_t per = images.data.size() / n;
  for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(cfg.seed, "diffusion/epoch/" + std::to_string(epoch)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      Tensor<float> batch({count, nc.in_channels, nc.image_size, nc.image_size});
      for (std::size_t i = 0; i < count; ++i)
        std::copy_n(images.data.data() + order[start + i] * per, per, batch.data() + i * per);
      loss_sum += trainer.train_step(batch, rng) * static_cast<double>(count);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back({epoch, loss_sum / static_cast<double>(n), seconds});

    const bool snapshot = snapshot_set.count(epoch) > 0;
    if (snapshot) {
      DenoiserNet<float> sampler = net;
      sampler.load_parameters(trainer.sampling_parameters());
      SampleOptions so;
      so.channels = nc.in_channels;
      so.size = nc.image_size;
      so.seed = derive_seed(cfg.seed, "diffusion/fid/" + std::to_string(epoch));
      so.variance = cfg.variance;
      const SampleResult sr = sample(predictor_for(sampler), schedule, cfg.fid_samples, so);
      save_grid_png(run_dir / "snapshots" / (epoch_tag(epoch) + ".png"), sr.images, 10);
      log.fid.push_back({epoch, fid_from_images(train_unit, sr.images, *extractor).fid});
    }
    const bool periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
    if (snapshot || periodic || epoch == cfg.epochs) save_state(epoch, snapshot || periodic);
    write_train_log(run_dir, log);
    if (options.on_epoch) options.on_epoch(log.epochs.back());
  }
  if (start_epoch > cfg.epochs) write_train_log(run_dir, log);
  return {log, latest};
}

TrainResult train(DenoiserNet<float>& net, const NoiseSchedule& schedule, const DatasetManifest& manifest,
                  const TrainConfig& cfg, const fs::path& run_dir, const TrainRunOptions& options) {
  if (manifest.records.empty()) throw std::invalid_argument("train: manifest is empty");
  const ParticleClass label = manifest.records.front().label;
  for (const auto& r : manifest.records) {
    if (r.label != label) {
      throw std::invalid_argument("train: manifest mixes classes (" + std::string(to_string(label)) + " and " +
                                  std::string(to_string(r.label)) + "); one model is trained per class");
    }
  }
  const ImageTensor unit = load_standardized(manifest.resolved_paths(), net.config().image_size);
  return train(net, schedule, to_model_range(unit), cfg, run_dir, options);
}

}  // namespace svp
