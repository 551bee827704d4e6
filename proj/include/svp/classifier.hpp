#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "svp/autodiff.hpp"
#include "svp/imageio.hpp"
#include "svp/manifest.hpp"
#include "svp/metrics.hpp"
#include "svp/ops.hpp"
#include "svp/optim.hpp"

namespace svp {

// Layer tables (input 3 x S x S, convolutions bias-free and followed by BatchNorm):
//   resnet18      7x7/2 conv 64, 3x3/2 max pool, basic blocks [2, 2, 2, 2] at
//                 widths 64, 128, 256, 512, global average pool, FC 512 -> 3
//   resnet50      same stem, bottleneck blocks [3, 4, 6, 3] at widths
//                 64, 128, 256, 512 (x4 expansion), FC 2048 -> 3
//   resnet8_tiny  3x3/2 conv 16, four basic blocks (16/1, 32/2, 32/2, 64/2),
//                 global average pool, FC 64 -> 3
// Downsampling blocks use a strided 1x1 projection shortcut.
enum class Architecture { kResNet18, kResNet50, kResNet8Tiny };

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view s);

struct ClassifierConfig {
  Architecture architecture = Architecture::kResNet8Tiny;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  std::size_t image_size = 64;

  void validate() const;
  bool operator==(const ClassifierConfig&) const = default;
};

void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

struct EvalReport {
  ConfusionMatrix3 confusion;
  ClassPrecision precision;
  double macro_precision = 0.0;  // lenient mean when some class is undefined (see warnings)
  double auprc = 0.0;            // NaN when some class has no positives
  ClassifierConfig config;
  int best_epoch = 0;
  std::vector<std::string> warnings;
};

EvalReport evaluate(std::span<const ScoreRecord> records, const ClassifierConfig& config);

void to_json(nlohmann::json& j, const EvalReport& r);
// Column order of the published results.
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);

namespace detail {
struct ClassifierLayout;
}

class ClassifierNet {
 public:
  ClassifierNet(Architecture architecture, std::uint64_t seed);

  Architecture architecture() const { return architecture_; }
  ParameterSet<float>& parameters() { return params_; }
  const ParameterSet<float>& parameters() const { return params_; }
  std::vector<ad::BatchNormStats<float>>& batch_norm_stats() { return stats_; }
  const std::vector<ad::BatchNormStats<float>>& batch_norm_stats() const { return stats_; }
  std::size_t fc_weight() const;
  std::size_t fc_bias() const;

  // Logits N x 3. Training mode uses batch statistics and updates running ones.
  ad::Var<float> forward(ad::Tape<float>& tape, const Tensor<float>& x, bool training);

  // Softmax scores (computed in double) with running statistics.
  std::vector<std::array<double, kNumClasses>> predict_scores(const Tensor<float>& x) const;

 private:
  Architecture architecture_;
  std::shared_ptr<const detail::ClassifierLayout> layout_;
  ParameterSet<float> params_;
  std::vector<ad::BatchNormStats<float>> stats_;
};

class DataLeakageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Throws DataLeakageError when any resolved path appears in both manifests.
void check_disjoint(const DatasetManifest& train, const DatasetManifest& val);

struct LabeledImages {
  Tensor<float> images;  // N x 3 x S x S, unit range
  std::vector<int> labels;
  std::vector<std::string> paths;  // resolved, normalized

  std::size_t size() const { return labels.size(); }
};

LabeledImages load_labeled(const DatasetManifest& manifest, std::size_t image_size);

struct ClassifierEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_selection = 0.0;
};

struct ClassifierResult {
  ClassifierNet net;  // weights of the best validation epoch
  EvalReport report;
  std::vector<ClassifierEpoch> history;
  std::vector<ScoreRecord> val_scores;
};

// Scores every image; batches of `batch` at a time.
std::vector<ScoreRecord> score_images(const ClassifierNet& net, const LabeledImages& data, std::size_t batch = 64);

ClassifierResult train_classifier(const ClassifierConfig& cfg, const LabeledImages& train, const LabeledImages& val);
ClassifierResult train_classifier(const ClassifierConfig& cfg, const DatasetManifest& train, const DatasetManifest& val);

struct GridSpec {
  std::vector<OptimizerKind> optimizers;
  std::vector<double> learning_rates;
  std::vector<double> weight_decays;
  std::vector<std::size_t> batch_sizes;

  // Adam/AdamW x 7 learning rates x 3 weight decays x 3 batch sizes.
  static GridSpec full();
  static GridSpec smoke();
  static GridSpec from_name(std::string_view name);

  std::size_t cardinality() const;
  // Optimizer-major order; run i gets seed derive_seed(base.seed, i).
  std::vector<ClassifierConfig> enumerate(const ClassifierConfig& base) const;
};

// Runs every configuration (up to `jobs` in parallel) and returns the reports
// sorted by macro precision, descending; ties keep enumeration order.
std::vector<EvalReport> grid_search(const GridSpec& grid, const ClassifierConfig& base, const LabeledImages& train,
                                    const LabeledImages& val, std::size_t jobs = 1,
                                    const std::function<void(std::size_t, const EvalReport&)>& on_done = {});

void write_grid_results(const std::filesystem::path& path, const std::vector<EvalReport>& reports);

}  // namespace svp
