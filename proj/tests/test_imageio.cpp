#include "doctest.h"

#include <cmath>
#include <cstring>

#include "support.hpp"
#include "svp/imageio.hpp"
#include "svp/manifest.hpp"
#include "svp/procedural.hpp"

using namespace svp;
using svp::testing::TempDir;

namespace {

// Minimal uncompressed little-endian grayscale TIFF, written by hand so the
// decoder is checked against bytes it did not produce.
void write_gray_tiff(const std::filesystem::path& path, std::uint16_t w, std::uint16_t h, int bits,
                     const std::vector<std::uint16_t>& samples) {
  std::vector<std::uint8_t> out;
  auto u16 = [&](std::uint16_t v) {
    out.push_back(v & 0xff);
    out.push_back(v >> 8);
  };
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
  };
  const std::uint32_t bytes_per = bits / 8;
  const std::uint32_t data_len = w * h * bytes_per;
  const std::uint16_t entries = 9;
  const std::uint32_t data_off = 8 + 2 + entries * 12 + 4;
  out.insert(out.end(), {'I', 'I'});
  u16(42);
  u32(8);
  u16(entries);
  auto entry = [&](std::uint16_t tag, std::uint16_t type, std::uint32_t value) {
    u16(tag);
    u16(type);
    u32(1);
    if (type == 3) {
      u16(static_cast<std::uint16_t>(value));
      u16(0);
    } else {
      u32(value);
    }
  };
  entry(256, 3, w);
  entry(257, 3, h);
  entry(258, 3, static_cast<std::uint32_t>(bits));
  entry(259, 3, 1);
  entry(262, 3, 1);
  entry(273, 4, data_off);
  entry(277, 3, 1);
  entry(278, 3, h);
  entry(279, 4, data_len);
  u32(0);
  for (auto s : samples) {
    if (bits == 8) {
      out.push_back(static_cast<std::uint8_t>(s));
    } else {
      u16(s);
    }
  }
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

RawImage ramp_image(std::size_t w, std::size_t h) {
  RawImage img(w, h, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>(x % 256);
      img.at(x, y, 1) = static_cast<std::uint8_t>((y / 2) % 256);
      img.at(x, y, 2) = static_cast<std::uint8_t>(255 - x % 256);
    }
  return img;
}

}  // namespace

TEST_CASE("load_image reads stored dimensions") {
  TempDir dir("imageio");
  RawImage img(128, 96, 3);
  Rng rng(1);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  save_png(dir / "a.png", img);
  const RawImage back = load_image(dir / "a.png");
  CHECK(back.width == 128);
  CHECK(back.height == 96);
  CHECK(back.channels == 3);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("load_image errors name the path") {
  TempDir dir("imageio");
  const auto missing = dir / "missing.png";
  try {
    load_image(missing);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(missing.string()) != std::string::npos);
  }
}

TEST_CASE("hand-written TIFFs: 8-bit decodes, 16-bit is rejected") {
  TempDir dir("imageio");
  std::vector<std::uint16_t> s(12);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<std::uint16_t>(20 * i);
  write_gray_tiff(dir / "g8.tif", 4, 3, 8, s);
  const RawImage g = load_image(dir / "g8.tif");
  CHECK(g.width == 4);
  CHECK(g.height == 3);
  CHECK(g.channels == 1);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(g.pixels[i] == s[i]);

  for (auto& v : s) v *= 200;
  write_gray_tiff(dir / "g16.tif", 4, 3, 16, s);
  try {
    load_image(dir / "g16.tif");
    FAIL("16-bit TIFF accepted");
  } catch (const ImageDecodeError& e) {
    CHECK(std::string(e.what()).find("g16.tif") != std::string::npos);
  }
}

TEST_CASE("standardize: 64x64 input is only rescaled") {
  const RawImage img = ramp_image(64, 64);
  const ImageTensor t = standardize(img);
  REQUIRE(t.data.shape() == Shape{1, 3, 64, 64});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) CHECK(t.data.at(0, c, y, x) == doctest::Approx(img.at(x, y, c) / 255.0).epsilon(1e-7));
}

TEST_CASE("standardize: 128x256 resizes to 64x128 then crops the center") {
  // Linear ramps are reproduced exactly by bilinear sampling away from the
  // borders, so the expected values follow from the sampling positions:
  // source = 2 * dst + 0.5 for a factor-2 reduction with half-pixel centers.
  const RawImage img = ramp_image(128, 256);
  const ImageTensor t = standardize(img);
  REQUIRE(t.data.shape() == Shape{1, 3, 64, 64});
  double worst = 0.0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const double sx = 2.0 * x + 0.5;
      const double sy = 2.0 * (y + 32) + 0.5;  // 128 rows, 32 cropped from the top
      // G channel is floor(y / 2): piecewise constant, interpolate the two rows.
      const double y0 = std::floor(sy), fy = sy - y0;
      const double g = (1 - fy) * std::floor(y0 / 2) + fy * std::floor((y0 + 1) / 2);
      const double expected[3] = {sx, g, 255.0 - sx};
      for (std::size_t c = 0; c < 3; ++c)
        worst = std::max(worst, std::abs(t.data.at(0, c, y, x) - expected[c] / 255.0));
    }
  CHECK(worst < 2.0 / 255.0);
}

TEST_CASE("standardize: 96x64 is center-cropped without resizing") {
  const RawImage img = ramp_image(96, 64);
  const ImageTensor t = standardize(img);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      CHECK(t.data.at(0, 0, y, x) == doctest::Approx(img.at(x + 16, y, 0) / 255.0).epsilon(1e-7));
}

TEST_CASE("standardize: grayscale replicated, any size gives 64x64x3 in [0,1]") {
  Rng rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 150));
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 150));
    const std::size_t c = trial % 2 ? 1 : 3;
    RawImage img(w, h, c);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    const ImageTensor t = standardize(img);
    REQUIRE(t.data.shape() == Shape{1, 3, 64, 64});
    CHECK(t.range == ValueRange::kUnit);
    for (float v : t.data.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    if (c == 1) {
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          CHECK(t.data.at(0, 0, y, x) == t.data.at(0, 1, y, x));
          CHECK(t.data.at(0, 0, y, x) == t.data.at(0, 2, y, x));
        }
    }
  }
}

TEST_CASE("standardize keeps the aspect ratio before cropping") {
  // 200x100: left half dark in channel 0, top quarter dark in channel 1. Both
  // axes scale by 0.64, so the left-half edge lands at x = 64 of the 128-wide
  // intermediate (x = 32 after the 32-pixel crop) and the top-quarter edge
  // at y = 16.
  RawImage img(200, 100, 3, 255);
  for (std::size_t y = 0; y < 100; ++y)
    for (std::size_t x = 0; x < 200; ++x) {
      if (x < 100) img.at(x, y, 0) = 0;
      if (y < 25) img.at(x, y, 1) = 0;
    }
  const ImageTensor t = standardize(img);
  std::size_t dark_cols = 0, dark_rows = 0;
  for (std::size_t x = 0; x < 64; ++x) dark_cols += t.data.at(0, 0, 40, x) < 0.5f;
  for (std::size_t y = 0; y < 64; ++y) dark_rows += t.data.at(0, 1, y, 40) < 0.5f;
  CHECK(dark_cols >= 31);
  CHECK(dark_cols <= 33);
  CHECK(dark_rows >= 15);
  CHECK(dark_rows <= 17);
}

TEST_CASE("model range mapping") {
  ImageTensor u{Tensor<float>({1, 3, 1, 2}, std::vector<float>{0.0f, 1.0f, 0.25f, 0.5f, 0.75f, 0.1f}), ValueRange::kUnit};
  const ImageTensor m = to_model_range(u);
  CHECK(m.range == ValueRange::kModel);
  CHECK(m.data[0] == -1.0f);
  CHECK(m.data[1] == 1.0f);
  const ImageTensor back = from_model_range(m);
  for (std::size_t i = 0; i < u.data.size(); ++i) CHECK(std::abs(back.data[i] - u.data[i]) <= 1e-7);
  CHECK_THROWS(to_model_range(m));
  CHECK_THROWS(from_model_range(u));
}

TEST_CASE("all split presets reproduce their published counts") {
  struct Row {
    const char* name;
    std::array<std::size_t, 3> real, gen;
  };
  const Row rows[] = {
      {"Real-0", {1000, 1000, 1000}, {0, 0, 0}},      {"Real-1", {1000, 1000, 2000}, {0, 0, 0}},
      {"Real-2", {1000, 1000, 5000}, {0, 0, 0}},      {"Real-3", {1000, 1000, 10000}, {0, 0, 0}},
      {"Real-4", {1000, 1000, 20000}, {0, 0, 0}},     {"Mixed-1", {1000, 1000, 2000}, {1000, 1000, 0}},
      {"Mixed-2", {1000, 1000, 5000}, {4000, 4000, 0}}, {"Mixed-3", {1000, 1000, 10000}, {9000, 9000, 0}},
      {"Mixed-4", {1000, 1000, 20000}, {19000, 19000, 0}},
  };
  CHECK(SplitSpec::preset_names().size() == 9);
  const auto real = testing::synthetic_pool(20000, 0, Provenance::kReal);
  const auto gen = testing::synthetic_pool(0, 19000, Provenance::kGenerated);
  for (const auto& row : rows) {
    CAPTURE(row.name);
    const auto spec = SplitSpec::preset(row.name);
    const auto m = build_split(spec, real, gen, 3);
    CHECK(m.split_name == row.name);
    for (auto c : kAllClasses) {
      CHECK(m.count(c, Provenance::kReal) == row.real[class_index(c)]);
      CHECK(m.count(c, Provenance::kGenerated) == row.gen[class_index(c)]);
    }
    m.validate();
  }
}

TEST_CASE("build_split is deterministic and reports shortfalls") {
  const auto real = testing::synthetic_pool(2500, 0, Provenance::kReal);
  const auto gen = testing::synthetic_pool(0, 1500, Provenance::kGenerated);
  const auto spec = SplitSpec::preset("Mixed-1");
  CHECK(manifest_to_csv(build_split(spec, real, gen, 1)) == manifest_to_csv(build_split(spec, real, gen, 1)));
  CHECK(manifest_to_csv(build_split(spec, real, gen, 1)) != manifest_to_csv(build_split(spec, real, gen, 2)));
  try {
    build_split(SplitSpec::preset("Real-2"), real, gen, 1);
    FAIL("expected shortfall");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("protein") != std::string::npos);
    CHECK(msg.find("2500") != std::string::npos);
  }
}

TEST_CASE("manifest invariants and CSV round trip") {
  DatasetManifest m;
  m.split_name = "x";
  m.records = {{"a.png", ParticleClass::kAirBubble, Provenance::kReal},
               {"b.png", ParticleClass::kSiliconeOil, Provenance::kGenerated}};
  const auto back = manifest_from_csv(manifest_to_csv(m), "x");
  CHECK(back == m);

  auto dup = m;
  dup.records.push_back(dup.records.front());
  CHECK_THROWS(dup.validate());
  auto majority_gen = m;
  majority_gen.records.push_back({"c.png", ParticleClass::kProtein, Provenance::kGenerated});
  CHECK_THROWS(majority_gen.validate());

  SplitSpec bad;
  bad.real = {1, 1, 1};
  bad.generated = {0, 0, 5};
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(SplitSpec::preset("Real-9"));
}

TEST_CASE("procedural corpus: counts and determinism") {
  TempDir a("corpus"), b("corpus");
  const auto styles = default_class_styles();
  const auto ma = generate_procedural_corpus(styles, 10, 7, a.path());
  const auto mb = generate_procedural_corpus(styles, 10, 7, b.path());
  CHECK(ma.records.size() == 30);
  for (auto c : kAllClasses) CHECK(ma.count(c) == 10);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path()))
    if (e.path().extension() == ".png") ++files;
  CHECK(files == 30);
  for (std::size_t i = 0; i < ma.records.size(); ++i) {
    CHECK(ma.records[i].path == mb.records[i].path);
    CHECK(load_image(ma.resolve(ma.records[i])).pixels == load_image(mb.resolve(mb.records[i])).pixels);
  }
  CHECK_THROWS(generate_procedural_corpus(styles, 0, 7, a / "empty"));
}

TEST_CASE("ring style radius measured from the radial profile") {
  ClassStyle ring{ParticleClass::kAirBubble, ShapeKind::kRing, 20.0, 0.0, 0.0, 0.0};
  Rng rng(5);
  const RawImage img = render_particle(ring, rng);
  // Mean darkness in 0.25 px wide annuli around the image center; the
  // darkest annulus is the ring.
  const double c = 32.0;
  std::vector<double> sum(160, 0.0), count(160, 0.0);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const double d = std::hypot(x + 0.5 - c, y + 0.5 - c);
      const auto bin = static_cast<std::size_t>(d / 0.25);
      if (bin >= sum.size()) continue;
      sum[bin] += 255.0 - img.at(x, y, 0);
      count[bin] += 1.0;
    }
  std::size_t best = 0;
  double best_v = -1.0;
  for (std::size_t b = 0; b < sum.size(); ++b) {
    if (count[b] < 4) continue;
    const double v = sum[b] / count[b];
    if (v > best_v) {
      best_v = v;
      best = b;
    }
  }
  const double radius = (best + 0.5) * 0.25;
  CHECK(std::abs(radius - 20.0) <= 1.0);
}
