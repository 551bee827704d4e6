#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "svp/imageio.hpp"
#include "svp/manifest.hpp"
#include "svp/rng.hpp"

namespace svp {

// Parametric stand-ins for flow-imaging particle micrographs:
//   kRing          anti-aliased dark annulus with a bright core (air bubble)
//   kDiscHighlight shaded filled disc with a specular highlight (silicone oil)
//   kRandomWalkBlob irregular aggregate stamped along a random walk (protein)
enum class ShapeKind { kRing, kDiscHighlight, kRandomWalkBlob };

struct ClassStyle {
  ParticleClass label = ParticleClass::kProtein;
  ShapeKind kind = ShapeKind::kRandomWalkBlob;
  double mean_radius = 14.0;    // ring radius / disc radius / walk extent, in pixels
  double radius_jitter = 1.0;   // standard deviation of the per-image radius
  double center_jitter = 3.0;   // max offset of the particle center from the image center
  double noise_sigma = 4.0;     // additive Gaussian noise, 8-bit units
};

std::vector<ClassStyle> default_class_styles();

// Grayscale 64x64 (by default) rendering of one particle.
RawImage render_particle(const ClassStyle& style, Rng& rng, std::size_t size = kStandardSize);

// Writes `<out_dir>/<label>/<label>_NNNNN.png` plus `<out_dir>/manifest.csv`
// (paths relative to out_dir). Image i of a class draws from
// derive_seed(seed, "<label>/<i>"), so content does not depend on counts.
DatasetManifest generate_procedural_corpus(const std::vector<ClassStyle>& styles,
                                           std::size_t n_per_class, std::uint64_t seed,
                                           const std::filesystem::path& out_dir);

// Same, with an individual image count per style (imbalanced corpora).
DatasetManifest generate_procedural_corpus(const std::vector<ClassStyle>& styles,
                                           const std::vector<std::size_t>& counts,
                                           std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace svp
