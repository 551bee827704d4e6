#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "svp/imageio.hpp"
#include "svp/manifest.hpp"

namespace svp {

enum class ExtractorKind { kPixelStats, kSmallCnn, kImported };

// Maps a unit-range image batch to an n x dim feature matrix.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;  // includes a version suffix where weights are involved
  virtual std::size_t dim() const = 0;
  virtual ExtractorKind kind() const = 0;
  virtual Eigen::MatrixXd extract(const ImageTensor& unit) const = 0;
};

// Bilinear resize to 16 x 16, flatten (C, H, W order), (x - 0.5) / 0.25.
class PixelStatsExtractor final : public FeatureExtractor {
 public:
  static constexpr std::size_t kSide = 16;
  static constexpr double kCenter = 0.5;
  static constexpr double kScale = 0.25;

  std::string name() const override { return "pixel_stats"; }
  std::size_t dim() const override { return 3 * kSide * kSide; }
  ExtractorKind kind() const override { return ExtractorKind::kPixelStats; }
  Eigen::MatrixXd extract(const ImageTensor& unit) const override;
};

// Fixed random-weight network: input resized to 32 x 32, three 3x3 stride-2
// convolutions (3 -> 16 -> 32 -> 64) with ReLU, then global average pooling
// concatenated with global max pooling. Weights are a pure function of the
// built-in seed and never trained.
class SmallCnnExtractor final : public FeatureExtractor {
 public:
  static constexpr std::uint64_t kWeightSeed = 0x5e11'cafe'2024ULL;
  SmallCnnExtractor();
  ~SmallCnnExtractor() override;

  std::string name() const override { return "small_cnn-v1"; }
  std::size_t dim() const override { return 128; }
  ExtractorKind kind() const override { return ExtractorKind::kSmallCnn; }
  Eigen::MatrixXd extract(const ImageTensor& unit) const override;

 private:
  struct Weights;
  std::unique_ptr<Weights> weights_;
};

// "pixel_stats" or "small_cnn"; imported embeddings bypass images and are
// read with load_embeddings instead.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name);

struct ImportedEmbeddings {
  Eigen::MatrixXd features;
  std::string extractor_name;
};

// CSV (one row per sample, optional non-numeric header) or raw little-endian
// f32 matrix with a JSON sidecar `<file>.json` holding {n, dim, extractor_name}.
// Throws when `expected_dim` is given and does not match.
ImportedEmbeddings load_embeddings(const std::filesystem::path& path,
                                   std::optional<std::size_t> expected_dim = std::nullopt);

struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t n = 0;
};

// Column mean and unbiased covariance (divisor n - 1), symmetrized.
FeatureStats gaussian_stats(const Eigen::MatrixXd& features);

// (sigma1 sigma2)^(1/2) as S1h (S1h sigma2 S1h)^(1/2) S1h^+, where S1h is the
// symmetric root of sigma1 and S1h^+ its pseudo-inverse. Eigenvalues below
// -1e-8 raise std::domain_error; those in [-1e-8, 0) are clamped to zero.
Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& sigma1, const Eigen::MatrixXd& sigma2);

// Symmetric PSD square root via eigendecomposition, same tolerance rules.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& sigma);

double frechet_distance(const FeatureStats& a, const FeatureStats& b);

struct FidReport {
  std::string extractor;
  std::size_t n_real = 0;
  std::size_t n_gen = 0;
  double fid = 0.0;
};

FidReport fid_from_images(const ImageTensor& real_unit, const ImageTensor& generated_unit,
                          const FeatureExtractor& extractor);

// Features of the first n_gen images (sorted by file name) in generated_dir
// against every image of the real manifest.
FidReport fid_protocol(const DatasetManifest& real, const std::filesystem::path& generated_dir,
                       const FeatureExtractor& extractor, std::size_t n_gen = 100);

// Sorted PNG/TIFF files of a directory (non-recursive).
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace svp
