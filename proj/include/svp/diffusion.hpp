#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "svp/checkpoint.hpp"
#include "svp/denoiser.hpp"
#include "svp/imageio.hpp"
#include "svp/manifest.hpp"
#include "svp/ops.hpp"
#include "svp/optim.hpp"
#include "svp/rng.hpp"
#include "svp/schedule.hpp"

namespace svp {

// Reverse-process variance: posterior beta-tilde (default) or beta.
enum class SamplerVariance { kPosterior, kBeta };

struct TrainConfig {
  int epochs = 1000;
  std::size_t batch_size = 128;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double weight_decay = 0.0;
  std::optional<double> ema_decay = 0.995;  // nullopt disables the shadow
  std::uint64_t seed = 0;
  std::vector<int> snapshot_epochs;
  ad::Reduction reduction = ad::Reduction::kMean;
  SamplerVariance variance = SamplerVariance::kPosterior;
  std::size_t fid_samples = 100;
  std::string extractor = "pixel_stats";
  int checkpoint_every = 0;  // 0: only at snapshot epochs and the end

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sum or mean of |eps_hat - eps|.
double l1_noise_loss(const Tensor<float>& eps_hat, const Tensor<float>& eps, ad::Reduction reduction);

// One optimizer (and EMA) per net; step() implements the training update.
class DiffusionTrainer {
 public:
  DiffusionTrainer(DenoiserNet<float>& net, const NoiseSchedule& schedule, const TrainConfig& cfg);

  // Draws t ~ U{1..T} then eps ~ N(0, I) per sample from `rng`, takes one
  // optimizer step on the L1 noise loss and returns the loss before the step.
  double train_step(const Tensor<float>& batch_model_range, Rng& rng);

  long long step_count() const { return optimizer_.step_count(); }
  AdamOptimizer<float>& optimizer() { return optimizer_; }
  // Parameters used for sampling: the EMA shadow when enabled, else the live net.
  const ParameterSet<float>& sampling_parameters() const;
  EmaShadow<float>* ema() { return ema_ ? &*ema_ : nullptr; }

 private:
  DenoiserNet<float>& net_;
  const NoiseSchedule& schedule_;
  TrainConfig cfg_;
  AdamOptimizer<float> optimizer_;
  std::optional<EmaShadow<float>> ema_;
};

// x_t -> predicted noise for a batch at a single timestep.
using NoisePredictor = std::function<Tensor<float>(const Tensor<float>& x, std::span<const int> t)>;

NoisePredictor predictor_for(const DenoiserNet<float>& net);

// One ancestral step. rngs holds one stream per sample (size N); z = 0 at t = 1.
Tensor<float> p_sample_step(const NoisePredictor& predict, const NoiseSchedule& schedule, const Tensor<float>& x_t,
                            int t, std::span<Rng> rngs, SamplerVariance variance = SamplerVariance::kPosterior);
Tensor<float> p_sample_step(const NoisePredictor& predict, const NoiseSchedule& schedule, const Tensor<float>& x_t,
                            int t, Rng& rng, SamplerVariance variance = SamplerVariance::kPosterior);

struct SampleTrajectory {
  std::vector<int> timesteps;            // strictly decreasing
  std::vector<ImageTensor> snapshots;    // model range; timestep 0 is the clamped final
  ImageTensor final;                     // model range, clamped to [-1, 1]
};

struct SampleResult {
  ImageTensor images;  // unit range
  SampleTrajectory trajectory;
};

struct SampleOptions {
  std::size_t channels = 3;
  std::size_t size = 64;
  std::vector<int> snapshot_steps;  // any of 0..T; sorted descending internally
  std::uint64_t seed = 0;
  SamplerVariance variance = SamplerVariance::kPosterior;
  std::size_t batch = 16;
};

// Image i draws x_T and every z from Rng(derive_seed(seed, i)), so batching
// only changes results through float accumulation order.
SampleResult sample(const NoisePredictor& predict, const NoiseSchedule& schedule, std::size_t n,
                    const SampleOptions& options);

// `count` timesteps evenly spaced from T down to 0 (both included).
std::vector<int> trajectory_steps(int steps, std::size_t count);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct FidRecord {
  int epoch = 0;
  double fid = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<FidRecord> fid;
};

struct TrainResult {
  TrainLog log;
  std::filesystem::path checkpoint;  // final checkpoint
};

struct TrainRunOptions {
  bool resume = false;
  nlohmann::json extra_meta = nlohmann::json::object();  // merged into checkpoint meta
  std::function<void(const EpochRecord&)> on_epoch;
};

// Run directory layout:
//   train_log.csv               epoch,loss,seconds
//   fid_checkpoints.csv         epoch,fid
//   checkpoints/latest.svpckpt  most recent state (resume point)
//   checkpoints/epoch_NNNNN.svpckpt
//   snapshots/epoch_NNNNN.png   grid of the FID samples at snapshot epochs
// `images_model` is the training set (N x C x S x S, model range).
TrainResult train(DenoiserNet<float>& net, const NoiseSchedule& schedule, const ImageTensor& images_model,
                  const TrainConfig& cfg, const std::filesystem::path& run_dir, const TrainRunOptions& options = {});

// Loads a single-class manifest at the net's image size and trains on it.
// Empty or mixed-class manifests are rejected.
TrainResult train(DenoiserNet<float>& net, const NoiseSchedule& schedule, const DatasetManifest& manifest,
                  const TrainConfig& cfg, const std::filesystem::path& run_dir, const TrainRunOptions& options = {});

void write_train_log(const std::filesystem::path& run_dir, const TrainLog& log);

// Denoiser checkpoints: parameters under "param/<name>", plus optional
// "ema/<name>", "adam.m/<name>", "adam.v/<name>". meta.kind = "denoiser".
Checkpoint make_denoiser_checkpoint(const DenoiserNet<float>& net, const NoiseSchedule& schedule);

struct LoadedDenoiser {
  DenoiserNet<float> net;  // EMA weights when present and prefer_ema
  NoiseSchedule schedule;
  nlohmann::json meta;
};

LoadedDenoiser load_denoiser(const std::filesystem::path& path, bool prefer_ema = true);

}  // namespace svp
