#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace svp {

// Class order is fixed everywhere (confusion-matrix rows/columns, report columns).
enum class ParticleClass : int { kSiliconeOil = 0, kAirBubble = 1, kProtein = 2 };
inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ParticleClass, kNumClasses> kAllClasses{
    ParticleClass::kSiliconeOil, ParticleClass::kAirBubble, ParticleClass::kProtein};

enum class Provenance { kReal, kGenerated };

std::string_view to_string(ParticleClass c);
std::string_view to_string(Provenance p);
ParticleClass parse_class(std::string_view s);
Provenance parse_provenance(std::string_view s);
inline std::size_t class_index(ParticleClass c) { return static_cast<std::size_t>(c); }

struct ManifestRecord {
  std::string path;
  ParticleClass label = ParticleClass::kProtein;
  Provenance provenance = Provenance::kReal;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::string split_name;
  std::vector<ManifestRecord> records;
  // Directory relative record paths resolve against; not serialized.
  std::filesystem::path base_dir;

  std::size_t count(ParticleClass c, Provenance p) const;
  std::size_t count(ParticleClass c) const;
  std::filesystem::path resolve(const ManifestRecord& r) const;
  std::vector<std::filesystem::path> resolved_paths() const;

  // Rejects duplicate paths and generated records of the majority class.
  void validate() const;

  bool operator==(const DatasetManifest& o) const {
    return split_name == o.split_name && records == o.records;
  }
};

// CSV with header `path,label,provenance`.
void write_manifest_csv(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest_csv(const std::filesystem::path& path);
std::string manifest_to_csv(const DatasetManifest& manifest);
DatasetManifest manifest_from_csv(std::string_view text, std::string split_name = {});

// Per-class real and generated counts of one training configuration.
struct SplitSpec {
  std::string name;
  std::array<std::size_t, kNumClasses> real{};
  std::array<std::size_t, kNumClasses> generated{};

  void validate() const;
  std::size_t total() const;
  // Counts multiplied by `factor` and rounded; at least one real image per class remains.
  SplitSpec scaled(double factor) const;

  static SplitSpec preset(std::string_view name);
  static const std::vector<std::string>& preset_names();
};

// Seeded sampling without replacement from the pools. Each (split, class,
// provenance) draw uses its own stream derive_seed(seed, "<split>/<class>/<prov>").
DatasetManifest build_split(const SplitSpec& spec, const DatasetManifest& real_pool,
                            const DatasetManifest& generated_pool, std::uint64_t seed);

}  // namespace svp
