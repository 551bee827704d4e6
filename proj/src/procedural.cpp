#include "svp/procedural.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace svp {

std::vector<ClassStyle> default_class_styles() {
  return {
      {ParticleClass::kSiliconeOil, ShapeKind::kDiscHighlight, 14.0, 2.5, 3.0, 4.0},
      {ParticleClass::kAirBubble, ShapeKind::kRing, 20.0, 1.0, 3.0, 4.0},
      {ParticleClass::kProtein, ShapeKind::kRandomWalkBlob, 10.0, 2.0, 4.0, 4.0},
  };
}

namespace {

constexpr double kBackground = 190.0;

double smooth_edge(double signed_distance) {
  // Coverage of a pixel whose center lies `signed_distance` outside an edge.
  return std::clamp(0.5 - signed_distance, 0.0, 1.0);
}

void render_ring(std::vector<double>& img, std::size_t size, double cx, double cy, double radius) {
  constexpr double kHalfWidth = 2.5;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      const double ring = std::clamp(1.0 - std::abs(d - radius) / kHalfWidth, 0.0, 1.0);
      const double core = smooth_edge(d - (radius - kHalfWidth));
      double& v = img[y * size + x];
      v += 25.0 * core;
      v -= 140.0 * ring;
    }
  }
}

void render_disc(std::vector<double>& img, std::size_t size, double cx, double cy, double radius,
                 Rng& rng) {
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double hx = cx + 0.4 * radius * std::cos(angle);
  const double hy = cy + 0.4 * radius * std::sin(angle);
  const double sigma = std::max(1.0, 0.22 * radius);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double d = std::hypot(px - cx, py - cy);
      const double cover = smooth_edge(d - radius);
      const double shade = 1.0 - 0.35 * std::min(1.0, d / radius);
      const double highlight =
          std::exp(-((px - hx) * (px - hx) + (py - hy) * (py - hy)) / (2.0 * sigma * sigma));
      double& v = img[y * size + x];
      v = v * (1.0 - cover) + cover * (70.0 + 60.0 * shade + 110.0 * highlight);
    }
  }
}

void render_blob(std::vector<double>& img, std::size_t size, double cx, double cy, double extent,
                 Rng& rng) {
  std::vector<double> dark(size * size, 0.0);
  double x = cx, y = cy;
  const int steps = 30 + static_cast<int>(rng.uniform_int(0, 20));
  for (int s = 0; s < steps; ++s) {
    const double r = rng.uniform(1.5, 3.5);
    const double x0 = std::max(0.0, x - 3 * r), x1 = std::min<double>(size, x + 3 * r);
    const double y0 = std::max(0.0, y - 3 * r), y1 = std::min<double>(size, y + 3 * r);
    for (auto py = static_cast<std::size_t>(y0); py < static_cast<std::size_t>(y1); ++py) {
      for (auto px = static_cast<std::size_t>(x0); px < static_cast<std::size_t>(x1); ++px) {
        const double dx = px + 0.5 - x, dy = py + 0.5 - y;
        dark[py * size + px] += 0.6 * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
      }
    }
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    x += 2.0 * std::cos(angle);
    y += 2.0 * std::sin(angle);
    // Pull the walk back toward the center once it leaves the target extent.
    const double dist = std::hypot(x - cx, y - cy);
    if (dist > extent) {
      x = cx + (x - cx) * extent / dist;
      y = cy + (y - cy) * extent / dist;
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i) img[i] -= 130.0 * std::min(1.0, dark[i]);
}

}  // namespace

RawImage render_particle(const ClassStyle& style, Rng& rng, std::size_t size) {
  if (size < 8) throw std::invalid_argument("render_particle: size must be at least 8");
  std::vector<double> img(size * size, kBackground);
  const double c = static_cast<double>(size) / 2.0;
  const double cx = c + rng.uniform(-style.center_jitter, style.center_jitter);
  const double cy = c + rng.uniform(-style.center_jitter, style.center_jitter);
  const double radius = std::max(2.0, style.mean_radius + style.radius_jitter * rng.normal());
  switch (style.kind) {
    case ShapeKind::kRing:
      render_ring(img, size, cx, cy, radius);
      break;
    case ShapeKind::kDiscHighlight:
      render_disc(img, size, cx, cy, radius, rng);
      break;
    case ShapeKind::kRandomWalkBlob:
      render_blob(img, size, cx, cy, radius, rng);
      break;
  }
  RawImage out(size, size, 1);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i] + style.noise_sigma * rng.normal();
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

DatasetManifest generate_procedural_corpus(const std::vector<ClassStyle>& styles,
                                           std::size_t n_per_class, std::uint64_t seed,
                                           const std::filesystem::path& out_dir) {
  return generate_procedural_corpus(styles, std::vector<std::size_t>(styles.size(), n_per_class), seed,
                                    out_dir);
}

DatasetManifest generate_procedural_corpus(const std::vector<ClassStyle>& styles,
                                           const std::vector<std::size_t>& counts,
                                           std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (styles.empty() || counts.size() != styles.size()) {
    throw std::invalid_argument("generate_procedural_corpus: one count per style required");
  }
  for (std::size_t n : counts)
    if (n < 1) throw std::invalid_argument("generate_procedural_corpus: n_per_class must be >= 1");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetManifest manifest;
  manifest.split_name = "procedural";
  manifest.base_dir = out_dir;
  for (std::size_t s = 0; s < styles.size(); ++s) {
    const std::string label(to_string(styles[s].label));
    std::filesystem::create_directories(out_dir / label, ec);
    if (ec) throw std::runtime_error("cannot create '" + (out_dir / label).string() + "': " + ec.message());
    for (std::size_t i = 0; i < counts[s]; ++i) {
      Rng rng(derive_seed(seed, label + "/" + std::to_string(i)));
      const RawImage img = render_particle(styles[s], rng);
      char name[64];
      std::snprintf(name, sizeof name, "%s_%05zu.png", label.c_str(), i);
      const std::string rel = label + "/" + name;
      save_png(out_dir / rel, img);
      manifest.records.push_back({rel, styles[s].label, Provenance::kReal});
    }
  }
  manifest.validate();
  write_manifest_csv(out_dir / "manifest.csv", manifest);
  return manifest;
}

}  // namespace svp
