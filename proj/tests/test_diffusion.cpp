#include "doctest.h"

#include <cmath>
#include <cstring>
#include <limits>

#include "support.hpp"
#include "svp/diffusion.hpp"
#include "svp/procedural.hpp"

using namespace svp;
using svp::testing::random_tensor;
using svp::testing::TempDir;

namespace {

bool same_bits(const ParameterSet<float>& a, const ParameterSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t p = 0; p < a.size(); ++p)
    if (std::memcmp(a[p].value.data(), b[p].value.data(), a[p].value.size() * sizeof(float)) != 0) return false;
  return true;
}

// A batch of model-range images in [-1, 1].
Tensor<float> model_batch(std::size_t n, std::size_t size, Rng& rng) {
  Tensor<float> t({n, 3, size, size});
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.seed = 5;
  return c;
}

// Denoiser that knows x0: returns exactly the noise that maps x0 to x_t.
NoisePredictor planted_oracle(const Tensor<float>& x0, const NoiseSchedule& schedule) {
  return [&x0, &schedule](const Tensor<float>& x, std::span<const int> t) {
    Tensor<float> eps(x.shape());
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const double ab = schedule.alpha_bar(t[i]);
      for (std::size_t j = 0; j < per; ++j) {
        const std::size_t k = i * per + j;
        eps[k] = static_cast<float>((x[k] - std::sqrt(ab) * x0[k % x0.size()]) / std::sqrt(1.0 - ab));
      }
    }
    return eps;
  };
}

}  // namespace

TEST_CASE("L1 noise loss examples") {
  const Tensor<float> a({1, 1, 2, 2}, 1.0f), b({1, 1, 2, 2}, 0.0f);
  CHECK(l1_noise_loss(a, b, ad::Reduction::kSum) == 4.0);
  CHECK(l1_noise_loss(a, b, ad::Reduction::kMean) == 1.0);
  CHECK(l1_noise_loss(a, a, ad::Reduction::kMean) == 0.0);
  CHECK_THROWS_AS(l1_noise_loss(a, Tensor<float>({1, 1, 2, 3}), ad::Reduction::kSum), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 1);
  const auto before = net.parameters();
  const auto schedule = NoiseSchedule::linear(1000);
  auto cfg = quick_config();
  cfg.learning_rate = 0.0;
  cfg.batch_size = 8;
  DiffusionTrainer trainer(net, schedule, cfg);
  Rng data(2), rng(3);
  const auto batch = model_batch(8, 16, data);
  double mean_loss = 0.0;
  for (int s = 0; s < 10; ++s) mean_loss += trainer.train_step(batch, rng) / 10.0;
  CHECK(same_bits(before, net.parameters()));
  // The head starts near zero, so the loss is E|N(0, 1)| = sqrt(2 / pi).
  Rng mc(4);
  double oracle = 0.0;
  for (int i = 0; i < 200000; ++i) oracle += std::abs(mc.normal()) / 200000.0;
  CHECK(std::abs(mean_loss - oracle) < 0.02);
  CHECK(std::abs(oracle - 0.798) < 0.005);
}

TEST_CASE("training steps are deterministic and EMA with decay 0 tracks parameters") {
  const auto schedule = NoiseSchedule::linear(1000);
  Rng data(6);
  const auto batch = model_batch(4, 16, data);
  auto run = [&](std::optional<double> ema) {
    DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 7);
    auto cfg = quick_config();
    cfg.ema_decay = ema;
    DiffusionTrainer trainer(net, schedule, cfg);
    Rng rng(8);
    std::vector<double> losses;
    for (int s = 0; s < 3; ++s) losses.push_back(trainer.train_step(batch, rng));
    if (ema) CHECK(same_bits(trainer.ema()->shadow(), net.parameters()));
    else CHECK(trainer.ema() == nullptr);
    CHECK(trainer.step_count() == 3);
    return std::make_pair(losses, net.parameters());
  };
  const auto a = run(0.0), b = run(0.0), c = run(std::nullopt);
  CHECK(a.first == b.first);
  CHECK(same_bits(a.second, b.second));
  CHECK(a.first == c.first);
}

TEST_CASE("non-finite batches abort with a diagnostic") {
  DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 1);
  const auto schedule = NoiseSchedule::linear(1000);
  DiffusionTrainer trainer(net, schedule, quick_config());
  Tensor<float> batch({2, 3, 16, 16});
  batch[5] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(1);
  try {
    trainer.train_step(batch, rng);
    FAIL("expected NonFiniteLossError");
  } catch (const NonFiniteLossError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("grad_norm") != std::string::npos);
    CHECK(msg.find("histogram") != std::string::npos);
  }
}

TEST_CASE("reverse step: shape, termination step and range errors") {
  const auto schedule = NoiseSchedule::linear(1000);
  const DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 2);
  const auto predict = predictor_for(net);
  Rng data(9);
  const auto x = model_batch(2, 16, data);
  Rng r1(1), r2(2);
  const auto a = p_sample_step(predict, schedule, x, 1, r1), b = p_sample_step(predict, schedule, x, 1, r2);
  CHECK(a.shape() == x.shape());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  const auto c = p_sample_step(predict, schedule, x, 2, r1), d = p_sample_step(predict, schedule, x, 2, r2);
  CHECK(std::memcmp(c.data(), d.data(), c.size() * sizeof(float)) != 0);
  CHECK_THROWS_AS(p_sample_step(predict, schedule, x, 0, r1), std::out_of_range);
  CHECK_THROWS_AS(p_sample_step(predict, schedule, x, 1001, r1), std::out_of_range);

  // Mean formula at t = 1 written out directly.
  const auto eps = predict(x, std::vector<int>{1, 1});
  const double alpha = schedule.alpha(1), beta = schedule.beta(1), ab = schedule.alpha_bar(1);
  for (std::size_t i = 0; i < x.size(); i += 37)
    CHECK(a[i] == doctest::Approx((x[i] - beta / std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(alpha)).epsilon(1e-5));
}

TEST_CASE("planted oracle denoiser reconstructs x0") {
  const auto schedule = NoiseSchedule::linear(1000);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng data(seed);
    const auto x0 = model_batch(1, 16, data);
    SampleOptions opt;
    opt.size = 16;
    opt.seed = seed;
    opt.batch = 3;
    const auto r = sample(planted_oracle(x0, schedule), schedule, 3, opt);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.trajectory.final.data.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(r.trajectory.final.data[i] - x0[i % x0.size()])));
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("sampling: determinism, snapshots, call count and output range") {
  const auto schedule = NoiseSchedule::linear(50);
  const DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 3);
  std::size_t images_seen = 0;
  const auto base = predictor_for(net);
  const NoisePredictor counting = [&](const Tensor<float>& x, std::span<const int> t) {
    images_seen += x.dim(0);
    return base(x, t);
  };
  SampleOptions opt;
  opt.size = 16;
  opt.seed = 11;
  opt.batch = 2;
  opt.snapshot_steps = {0, 50, 25};
  const auto a = sample(counting, schedule, 3, opt);
  CHECK(images_seen == 3 * 50);
  REQUIRE(a.trajectory.timesteps == std::vector<int>{50, 25, 0});

  // Same seed and batch: bit-identical. Another batch size only changes GEMM
  // accumulation order, so images agree to float rounding.
  const auto same = sample(base, schedule, 3, opt);
  CHECK(std::memcmp(a.images.data.data(), same.images.data.data(), a.images.data.size() * sizeof(float)) == 0);
  opt.batch = 3;
  const auto b = sample(base, schedule, 3, opt);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.images.data.size(); ++i)
    gap = std::max(gap, static_cast<double>(std::abs(a.images.data[i] - b.images.data[i])));
  CHECK(gap < 1e-5);

  // t = T is the initial Gaussian draw of each image.
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng(derive_seed(11, i));
    for (std::size_t j = 0; j < 3 * 16 * 16; ++j)
      REQUIRE(a.trajectory.snapshots[0].data[i * 768 + j] == static_cast<float>(rng.normal()));
  }
  const auto& last = a.trajectory.snapshots[2].data;
  CHECK(std::memcmp(last.data(), a.trajectory.final.data.data(), last.size() * sizeof(float)) == 0);
  for (float v : a.images.data.values()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  CHECK(a.images.range == ValueRange::kUnit);

  opt.snapshot_steps = {51};
  CHECK_THROWS(sample(base, schedule, 1, opt));
  opt.snapshot_steps = {};
  CHECK_THROWS(sample(base, schedule, 0, opt));

  const auto steps = trajectory_steps(1000, 6);
  REQUIRE(steps.size() == 6);
  CHECK(steps.front() == 1000);
  CHECK(steps.back() == 0);
  for (std::size_t i = 1; i < steps.size(); ++i) CHECK(steps[i] < steps[i - 1]);
}

TEST_CASE("train: epoch and batch counting, logs and checkpoints") {
  TempDir dir("train");
  const auto schedule = NoiseSchedule::linear(100);
  DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 4);
  Rng data(12);
  const ImageTensor images{model_batch(10, 16, data), ValueRange::kModel};
  auto cfg = quick_config();
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.snapshot_epochs = {2};
  cfg.fid_samples = 4;
  std::vector<int> seen;
  TrainRunOptions options;
  options.on_epoch = [&](const EpochRecord& r) { seen.push_back(r.epoch); };
  const auto result = train(net, schedule, images, cfg, dir.path(), options);
  REQUIRE(result.log.epochs.size() == 2);
  CHECK(result.log.epochs[0].epoch == 1);
  CHECK(result.log.epochs[1].epoch == 2);
  CHECK(seen == std::vector<int>{1, 2});
  REQUIRE(result.log.fid.size() == 1);
  CHECK(result.log.fid[0].epoch == 2);
  CHECK(std::isfinite(result.log.fid[0].fid));
  CHECK(result.log.fid[0].fid >= 0.0);
  for (const auto& e : result.log.epochs) CHECK(std::isfinite(e.loss));

  const auto ck = read_checkpoint(result.checkpoint);
  CHECK(ck.meta.at("step").get<long long>() == 6);  // 3 batches per epoch, last one partial
  CHECK(ck.meta.at("epoch").get<int>() == 2);
  CHECK(std::filesystem::exists(dir / "train_log.csv"));
  CHECK(std::filesystem::exists(dir / "fid_checkpoints.csv"));
  CHECK(std::filesystem::exists(dir / "checkpoints/epoch_00002.svpckpt"));
  CHECK(std::filesystem::exists(dir / "snapshots/epoch_00002.png"));
  CHECK(testing::read_file(dir / "train_log.csv").rfind("epoch,loss,seconds\n", 0) == 0);
  CHECK(testing::read_file(dir / "fid_checkpoints.csv").rfind("epoch,fid\n", 0) == 0);

  // Same seed, fresh directory: identical loss sequence.
  TempDir again("train2");
  DenoiserNet<float> net2(DenoiserConfig::tiny_preset(), 4);
  const auto second = train(net2, schedule, images, cfg, again.path());
  for (std::size_t i = 0; i < 2; ++i) CHECK(second.log.epochs[i].loss == result.log.epochs[i].loss);
  CHECK(second.log.fid[0].fid == result.log.fid[0].fid);
}

TEST_CASE("train: resume continues from the latest checkpoint") {
  const auto schedule = NoiseSchedule::linear(100);
  Rng data(13);
  const ImageTensor images{model_batch(6, 16, data), ValueRange::kModel};
  auto cfg = quick_config();
  cfg.batch_size = 3;

  TempDir straight("straight");
  DenoiserNet<float> a(DenoiserConfig::tiny_preset(), 5);
  cfg.epochs = 3;
  const auto full = train(a, schedule, images, cfg, straight.path());

  TempDir split("split");
  DenoiserNet<float> b(DenoiserConfig::tiny_preset(), 5);
  cfg.epochs = 2;
  train(b, schedule, images, cfg, split.path());
  DenoiserNet<float> c(DenoiserConfig::tiny_preset(), 5);
  cfg.epochs = 3;
  TrainRunOptions resume;
  resume.resume = true;
  const auto resumed = train(c, schedule, images, cfg, split.path(), resume);
  REQUIRE(resumed.log.epochs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(resumed.log.epochs[i].epoch == static_cast<int>(i + 1));
    CHECK(resumed.log.epochs[i].loss == full.log.epochs[i].loss);
  }
  CHECK(same_bits(c.parameters(), a.parameters()));

  TempDir empty("empty");
  DenoiserNet<float> d(DenoiserConfig::tiny_preset(), 5);
  CHECK_THROWS(train(d, schedule, images, cfg, empty.path(), resume));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.snapshot_epochs = {1, 5, 10, 20, 50, 100, 200, 500, 1000};
  CHECK_NOTHROW(c.validate());
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>().snapshot_epochs == c.snapshot_epochs);
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.ema_decay = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("train from a manifest: single class only") {
  TempDir dir("manifest");
  auto styles = default_class_styles();
  const auto corpus = generate_procedural_corpus(styles, 3, 1, dir.path());
  const auto schedule = NoiseSchedule::linear(20);
  auto cfg = quick_config();

  DenoiserNet<float> net(DenoiserConfig::tiny_preset(), 6);
  TempDir run1("mixed");
  CHECK_THROWS_AS(train(net, schedule, corpus, cfg, run1.path()), std::invalid_argument);

  DatasetManifest empty;
  CHECK_THROWS_AS(train(net, schedule, empty, cfg, run1.path()), std::invalid_argument);

  DatasetManifest one = corpus;
  std::erase_if(one.records, [](const ManifestRecord& r) { return r.label != ParticleClass::kAirBubble; });
  REQUIRE(one.records.size() == 3);
  TempDir run2("single");
  const auto r = train(net, schedule, one, cfg, run2.path());
  CHECK(r.log.epochs.size() == 1);
}
