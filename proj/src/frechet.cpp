#include "svp/frechet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "svp/ops.hpp"
#include "svp/parameters.hpp"

namespace svp {

namespace {

constexpr double kNegativeEigenTolerance = 1e-8;

// Eigenvalues of a symmetric PSD matrix, clamped. Values below the rounding
// floor dim * eps * max|lambda| carry no information and are zeroed too.
Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& raw, const char* what) {
  const double min = raw.minCoeff();
  if (min < -kNegativeEigenTolerance) {
    std::ostringstream msg;
    msg << what << ": matrix is not positive semi-definite (eigenvalue " << min << ")";
    throw std::domain_error(msg.str());
  }
  const double floor = static_cast<double>(raw.size()) * std::numeric_limits<double>::epsilon() *
                       raw.cwiseAbs().maxCoeff();
  Eigen::VectorXd out = raw;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (out[i] <= floor) out[i] = 0.0;
  return out;
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigensolve(const Eigen::MatrixXd& m, const char* what) {
  if (m.rows() != m.cols()) throw std::invalid_argument(std::string(what) + ": matrix is not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw std::runtime_error(std::string(what) + ": eigensolver did not converge");
  return es;
}

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

Eigen::MatrixXd to_matrix(const Tensor<float>& batch) {
  const std::size_t n = batch.dim(0);
  const std::size_t d = batch.size() / n;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = batch[i * d + j];
  return out;
}

void require_images(const ImageTensor& unit, const char* what) {
  if (unit.range != ValueRange::kUnit) throw std::invalid_argument(std::string(what) + ": expects unit-range images");
  if (unit.data.rank() != 4 || unit.data.dim(0) == 0 || unit.data.dim(1) != 3)
    throw std::invalid_argument(std::string(what) + ": expects a non-empty N x 3 x H x W batch, got " +
                                shape_str(unit.data.shape()));
}

}  // namespace

Eigen::MatrixXd PixelStatsExtractor::extract(const ImageTensor& unit) const {
  require_images(unit, "pixel_stats");
  Eigen::MatrixXd f = to_matrix(resize_bilinear(unit.data, kSide, kSide));
  return (f.array() - kCenter) / kScale;
}

struct SmallCnnExtractor::Weights {
  ParameterSet<float> params;
};

SmallCnnExtractor::SmallCnnExtractor() : weights_(std::make_unique<Weights>()) {
  const std::size_t widths[] = {3, 16, 32, 64};
  std::vector<ParameterSpec> specs;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t fan_in = widths[i] * 9;
    specs.push_back({"conv" + std::to_string(i) + ".weight", {widths[i + 1], widths[i], 3, 3},
                     ParameterSpec::Init::kUniformFanIn, fan_in});
    specs.push_back({"conv" + std::to_string(i) + ".bias", {widths[i + 1]}, ParameterSpec::Init::kUniformFanIn, fan_in});
  }
  weights_->params = materialize<float>(specs, kWeightSeed);
}

SmallCnnExtractor::~SmallCnnExtractor() = default;

Eigen::MatrixXd SmallCnnExtractor::extract(const ImageTensor& unit) const {
  require_images(unit, "small_cnn");
  const Tensor<float> x = resize_bilinear(unit.data, 32, 32);
  const std::size_t n = x.dim(0);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim()));
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    const std::size_t per = x.size() / n;
    Tensor<float> part({count, 3, 32, 32},
                       std::vector<float>(x.data() + start * per, x.data() + (start + count) * per));
    ad::Tape<float> tape(false);
    ad::Var<float> h = tape.input(std::move(part));
    for (std::size_t i = 0; i < 3; ++i) {
      h = ad::relu(ad::conv2d(h, weights_->params.leaf(tape, 2 * i),
                              std::optional<ad::Var<float>>(weights_->params.leaf(tape, 2 * i + 1)), 2, 1));
    }
    const Tensor<float>& fm = h.value();
    const std::size_t c = fm.dim(1), hw = fm.dim(2) * fm.dim(3);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = fm.data() + (s * c + ch) * hw;
        double sum = 0.0, mx = p[0];
        for (std::size_t k = 0; k < hw; ++k) {
          sum += p[k];
          mx = std::max<double>(mx, p[k]);
        }
        const auto row = static_cast<Eigen::Index>(start + s);
        out(row, static_cast<Eigen::Index>(ch)) = sum / static_cast<double>(hw);
        out(row, static_cast<Eigen::Index>(c + ch)) = mx;
      }
    }
  }
  return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name) {
  if (name == "pixel_stats") return std::make_unique<PixelStatsExtractor>();
  if (name == "small_cnn" || name == "small_cnn-v1") return std::make_unique<SmallCnnExtractor>();
  throw std::invalid_argument("unknown feature extractor '" + name + "' (valid: pixel_stats, small_cnn, imported)");
}

ImportedEmbeddings load_embeddings(const std::filesystem::path& path, std::optional<std::size_t> expected_dim) {
  ImportedEmbeddings out;
  std::vector<std::vector<double>> rows;
  if (path.extension() == ".csv") {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embeddings file " + path.string());
    out.extractor_name = "imported";
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ss(line);
      std::string cell;
      bool numeric = true;
      while (std::getline(ss, cell, ',')) {
        try {
          std::size_t used = 0;
          row.push_back(std::stod(cell, &used));
        } catch (const std::exception&) {
          numeric = false;
          break;
        }
      }
      const bool header = first && !numeric;
      first = false;
      if (header) continue;
      if (!numeric) throw std::runtime_error("non-numeric value in embeddings file " + path.string());
      if (!rows.empty() && row.size() != rows.front().size())
        throw std::runtime_error("ragged rows in embeddings file " + path.string());
      rows.push_back(std::move(row));
    }
  } else {
    auto sidecar = path;
    sidecar += ".json";
    std::ifstream meta_in(sidecar);
    if (!meta_in) throw std::runtime_error("missing JSON sidecar " + sidecar.string());
    const auto meta = nlohmann::json::parse(meta_in);
    const auto n = meta.at("n").get<std::size_t>();
    const auto d = meta.at("dim").get<std::size_t>();
    out.extractor_name = meta.at("extractor_name").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open embeddings file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != n * d * 4) {
      throw std::runtime_error("embeddings file " + path.string() + " holds " + std::to_string(bytes.size()) +
                               " bytes, sidecar declares " + std::to_string(n) + " x " + std::to_string(d) + " f32");
    }
    rows.assign(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n * d; ++i) {
      const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) | (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                              (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                              (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
      rows[i / d][i % d] = std::bit_cast<float>(u);
    }
  }
  if (rows.empty()) throw std::runtime_error("embeddings file " + path.string() + " has no rows");
  const std::size_t d = rows.front().size();
  if (expected_dim && *expected_dim != d) {
    throw std::invalid_argument("embedding dimension mismatch in " + path.string() + ": expected " +
                                std::to_string(*expected_dim) + ", got " + std::to_string(d));
  }
  out.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return out;
}

FeatureStats gaussian_stats(const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  if (n < 2) throw std::invalid_argument("gaussian_stats: need at least 2 samples, got " + std::to_string(n));
  FeatureStats s;
  s.n = static_cast<std::size_t>(n);
  s.mu = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mu.transpose();
  s.sigma = symmetrized((centered.transpose() * centered) / static_cast<double>(n - 1));
  return s;
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& sigma) {
  const auto es = eigensolve(symmetrized(sigma), "sqrtm");
  const Eigen::VectorXd lambda = clamped_eigenvalues(es.eigenvalues(), "sqrtm");
  return es.eigenvectors() * lambda.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& sigma1, const Eigen::MatrixXd& sigma2) {
  if (sigma1.rows() != sigma2.rows() || sigma1.cols() != sigma2.cols())
    throw std::invalid_argument("sqrtm_product: dimension mismatch");
  const auto es1 = eigensolve(symmetrized(sigma1), "sqrtm_product");
  const Eigen::VectorXd l1 = clamped_eigenvalues(es1.eigenvalues(), "sqrtm_product");
  Eigen::VectorXd root = l1.cwiseSqrt();
  Eigen::VectorXd inv_root(root.size());
  for (Eigen::Index i = 0; i < root.size(); ++i) inv_root[i] = root[i] > 0.0 ? 1.0 / root[i] : 0.0;
  const Eigen::MatrixXd& v = es1.eigenvectors();
  const Eigen::MatrixXd s1h = v * root.asDiagonal() * v.transpose();
  const Eigen::MatrixXd s1h_inv = v * inv_root.asDiagonal() * v.transpose();
  const Eigen::MatrixXd inner = sqrtm_psd(s1h * symmetrized(sigma2) * s1h);
  return s1h * inner * s1h_inv;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows()) {
    throw std::invalid_argument("frechet_distance: dimension mismatch (" + std::to_string(a.mu.size()) + " vs " +
                                std::to_string(b.mu.size()) + ")");
  }
  if (a.mu == b.mu && a.sigma == b.sigma) return 0.0;
  const double mean_term = (a.mu - b.mu).squaredNorm();
  // Tr((Sa Sb)^(1/2)) = Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), a symmetric PSD problem.
  const Eigen::MatrixXd sah = sqrtm_psd(a.sigma);
  const auto es = eigensolve(symmetrized(sah * b.sigma * sah), "frechet_distance");
  const double trace_root = clamped_eigenvalues(es.eigenvalues(), "frechet_distance").cwiseSqrt().sum();
  const double d = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * trace_root;
  if (d < 0.0) {
    if (d > -1e-6) return 0.0;
    throw std::domain_error("frechet_distance: negative result " + std::to_string(d));
  }
  return d;
}

FidReport fid_from_images(const ImageTensor& real_unit, const ImageTensor& generated_unit,
                          const FeatureExtractor& extractor) {
  FidReport r;
  r.extractor = extractor.name();
  r.n_real = real_unit.count();
  r.n_gen = generated_unit.count();
  r.fid = frechet_distance(gaussian_stats(extractor.extract(real_unit)),
                           gaussian_stats(extractor.extract(generated_unit)));
  return r;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".tif" || ext == ".tiff") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FidReport fid_protocol(const DatasetManifest& real, const std::filesystem::path& generated_dir,
                       const FeatureExtractor& extractor, std::size_t n_gen) {
  if (n_gen < 2) throw std::invalid_argument("fid_protocol: n_gen must be at least 2");
  if (real.records.empty()) throw std::invalid_argument("fid_protocol: real manifest is empty");
  auto files = list_images(generated_dir);
  if (files.size() < n_gen) {
    throw std::runtime_error("fid_protocol: " + generated_dir.string() + " holds " + std::to_string(files.size()) +
                             " images, " + std::to_string(n_gen) + " requested");
  }
  files.resize(n_gen);
  return fid_from_images(load_standardized(real.resolved_paths()), load_standardized(files), extractor);
}

}  // namespace svp
