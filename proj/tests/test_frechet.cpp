#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "svp/frechet.hpp"
#include "svp/procedural.hpp"

using namespace svp;
using svp::testing::TempDir;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

Eigen::MatrixXd random_spd(Eigen::Index dim, Rng& rng) {
  const Eigen::MatrixXd a = random_matrix(dim, dim, rng);
  return a * a.transpose() / static_cast<double>(dim) + 0.1 * Eigen::MatrixXd::Identity(dim, dim);
}

FeatureStats stats_of(Eigen::VectorXd mu, Eigen::MatrixXd sigma) {
  FeatureStats s;
  s.mu = std::move(mu);
  s.sigma = std::move(sigma);
  s.n = 10;
  return s;
}

ImageTensor random_images(std::size_t n, Rng& rng) {
  ImageTensor t{Tensor<float>({n, 3, 64, 64}), ValueRange::kUnit};
  for (auto& v : t.data.values()) v = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("pixel_stats features") {
  PixelStatsExtractor ex;
  CHECK(ex.dim() == 768);
  Rng rng(1);
  const auto images = random_images(3, rng);
  const auto f1 = ex.extract(images), f2 = ex.extract(images);
  CHECK(f1.rows() == 3);
  CHECK(f1.cols() == 768);
  CHECK((f1 - f2).cwiseAbs().maxCoeff() == 0.0);
  // A constant 0.75 image maps every feature to (0.75 - 0.5) / 0.25 = 1.
  ImageTensor flat{Tensor<float>({1, 3, 64, 64}, 0.75f), ValueRange::kUnit};
  const auto ff = ex.extract(flat);
  CHECK((ff.array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("small_cnn features are fixed and deterministic") {
  const auto a = make_extractor("small_cnn"), b = make_extractor("small_cnn");
  CHECK(a->dim() == 128);
  CHECK(a->name() == "small_cnn-v1");
  Rng rng(2);
  const auto images = random_images(4, rng);
  const auto fa = a->extract(images), fb = b->extract(images);
  CHECK(fa.rows() == 4);
  CHECK(fa.cols() == 128);
  CHECK((fa - fb).cwiseAbs().maxCoeff() == 0.0);
  CHECK(fa.allFinite());
  CHECK(make_extractor("pixel_stats")->kind() == ExtractorKind::kPixelStats);
  CHECK_THROWS(make_extractor("inception"));
}

TEST_CASE("gaussian_stats examples and brute-force oracle") {
  Eigen::MatrixXd two(2, 2);
  two << 0, 0, 2, 2;
  const auto s = gaussian_stats(two);
  CHECK(s.n == 2);
  CHECK(s.mu(0) == 1.0);
  CHECK(s.mu(1) == 1.0);
  CHECK((s.sigma - Eigen::MatrixXd::Constant(2, 2, 2.0)).cwiseAbs().maxCoeff() < 1e-15);

  const Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(6, 3, 4.2);
  CHECK(gaussian_stats(constant).sigma.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS(gaussian_stats(Eigen::MatrixXd::Zero(1, 3)));

  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd x = random_matrix(100, 5, rng);
    const auto st = gaussian_stats(x);
    for (int j = 0; j < 5; ++j) {
      double m = 0;
      for (int i = 0; i < 100; ++i) m += x(i, j);
      m /= 100;
      CHECK(std::abs(st.mu(j) - m) < 1e-12);
    }
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b) {
        double ma = 0, mb = 0;
        for (int i = 0; i < 100; ++i) {
          ma += x(i, a);
          mb += x(i, b);
        }
        ma /= 100;
        mb /= 100;
        double c = 0;
        for (int i = 0; i < 100; ++i) c += (x(i, a) - ma) * (x(i, b) - mb);
        c /= 99;
        CHECK(std::abs(st.sigma(a, b) - c) < 1e-10);
        CHECK(st.sigma(a, b) == st.sigma(b, a));
      }
  }
}

TEST_CASE("matrix square roots") {
  const Eigen::MatrixXd i3 = Eigen::MatrixXd::Identity(3, 3);
  CHECK((sqrtm_product(i3, i3) - i3).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((sqrtm_product(4 * i3, 9 * i3) - 6 * i3).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::MatrixXd bad = i3;
  bad(2, 2) = -1e-3;
  CHECK_THROWS_AS(sqrtm_psd(bad), std::domain_error);
  bad(2, 2) = -1e-10;
  const auto clamped = sqrtm_psd(bad);
  CHECK(clamped(2, 2) == 0.0);

  // Residual ||S S - s1 s2|| / ||s1 s2|| over random SPD pairs.
  Rng rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto dim = static_cast<Eigen::Index>(rng.uniform_int(2, 32));
    const auto s1 = random_spd(dim, rng), s2 = random_spd(dim, rng);
    const Eigen::MatrixXd prod = s1 * s2;
    const auto root = sqrtm_product(s1, s2);
    worst = std::max(worst, (root * root - prod).norm() / prod.norm());
  }
  CHECK(worst < 1e-8);

  const auto s = random_spd(6, rng);
  const auto r = sqrtm_psd(s);
  CHECK((r * r - s).norm() / s.norm() < 1e-12);
  CHECK((r - r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Frechet distance examples") {
  Rng rng(5);
  const auto a = stats_of(Eigen::VectorXd::Random(4), random_spd(4, rng));
  CHECK(frechet_distance(a, a) == 0.0);

  const auto n01 = stats_of(Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Identity(1, 1));
  const auto n11 = stats_of(Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Identity(1, 1));
  CHECK(frechet_distance(n01, n11) == 1.0);

  Eigen::VectorXd mu2(2);
  mu2 << 3, 4;
  const auto d1 = stats_of(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  const auto d2 = stats_of(mu2, 4 * Eigen::MatrixXd::Identity(2, 2));
  CHECK(frechet_distance(d1, d2) == doctest::Approx(27.0).epsilon(1e-14));

  CHECK_THROWS(frechet_distance(d1, n01));
}

TEST_CASE("Frechet distance: symmetry, non-negativity and an eigenvalue oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto dim = static_cast<Eigen::Index>(rng.uniform_int(1, 12));
    const auto a = stats_of(random_matrix(dim, 1, rng).col(0), random_spd(dim, rng));
    const auto b = stats_of(random_matrix(dim, 1, rng).col(0), random_spd(dim, rng));
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    CHECK(std::abs(ab - ba) < 1e-8);
    CHECK(ab >= 0.0);
    // Tr (s1 s2)^(1/2) = sum of square roots of the (real, positive) eigenvalues of s1 s2.
    const Eigen::MatrixXd prod = a.sigma * b.sigma;
    Eigen::EigenSolver<Eigen::MatrixXd> es(prod);
    double tr_root = 0.0;
    for (Eigen::Index i = 0; i < dim; ++i) tr_root += std::sqrt(es.eigenvalues()(i).real());
    const double oracle =
        (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_root;
    CHECK(ab == doctest::Approx(oracle).epsilon(1e-9));
  }
}

TEST_CASE("FID protocol on procedural images") {
  TempDir dir("fid");
  const auto corpus = generate_procedural_corpus(default_class_styles(), 12, 3, dir / "real");
  DatasetManifest real = corpus;
  std::erase_if(real.records, [](const ManifestRecord& r) { return r.label != ParticleClass::kSiliconeOil; });
  REQUIRE(real.records.size() == 12);
  PixelStatsExtractor ex;

  // Copies of the real images.
  std::filesystem::create_directories(dir / "copy");
  for (std::size_t i = 0; i < real.records.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu.png", i);
    std::filesystem::copy_file(real.resolve(real.records[i]), dir / "copy" / name);
  }
  const auto same = fid_protocol(real, dir / "copy", ex, 12);
  CHECK(same.fid < 1e-6);
  CHECK(same.extractor == "pixel_stats");
  CHECK(same.n_real == 12);
  CHECK(same.n_gen == 12);
  CHECK_THROWS(fid_protocol(real, dir / "copy", ex, 13));
  CHECK_THROWS(fid_protocol(real, dir / "missing", ex, 12));

  // Uniform noise images score worse than a subset of the real images.
  std::filesystem::create_directories(dir / "noise");
  Rng rng(7);
  for (int i = 0; i < 12; ++i) {
    RawImage img(64, 64, 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    char name[32];
    std::snprintf(name, sizeof name, "n_%03d.png", i);
    save_png(dir / "noise" / name, img);
  }
  const auto subset = fid_protocol(real, dir / "copy", ex, 8);
  const auto noise = fid_protocol(real, dir / "noise", ex, 8);
  CHECK(noise.fid > subset.fid);
}

TEST_CASE("imported embeddings: CSV and binary with sidecar") {
  TempDir dir("emb");
  {
    std::ofstream csv(dir / "f.csv");
    csv << "a,b,c\n1,2,3\n4,5,6\n";
  }
  const auto e = load_embeddings(dir / "f.csv", 3);
  REQUIRE(e.features.rows() == 2);
  CHECK(e.features(1, 2) == 6.0);
  try {
    load_embeddings(dir / "f.csv", 5);
    FAIL("expected a dimension error");
  } catch (const std::exception& ex) {
    const std::string msg = ex.what();
    CHECK(msg.find('5') != std::string::npos);
    CHECK(msg.find('3') != std::string::npos);
  }

  const std::vector<float> values{0.5f, -1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f, 7.0f};
  {
    std::ofstream bin(dir / "f.bin", std::ios::binary);
    bin.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    std::ofstream side(dir / "f.bin.json");
    side << R"({"n": 4, "dim": 2, "extractor_name": "inception-export"})";
  }
  const auto b = load_embeddings(dir / "f.bin", 2);
  REQUIRE(b.features.rows() == 4);
  REQUIRE(b.features.cols() == 2);
  CHECK(b.features(0, 1) == -1.0);
  CHECK(b.features(3, 0) == 6.0);
  CHECK(b.extractor_name == "inception-export");
  CHECK_THROWS(load_embeddings(dir / "f.bin", 3));
}
