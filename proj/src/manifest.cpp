#include "svp/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "svp/rng.hpp"

namespace svp {

std::string_view to_string(ParticleClass c) {
  switch (c) {
    case ParticleClass::kSiliconeOil:
      return "silicone_oil";
    case ParticleClass::kAirBubble:
      return "air_bubble";
    case ParticleClass::kProtein:
      return "protein";
  }
  throw std::invalid_argument("invalid particle class");
}

std::string_view to_string(Provenance p) { return p == Provenance::kReal ? "real" : "generated"; }

ParticleClass parse_class(std::string_view s) {
  for (auto c : kAllClasses)
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown label '" + std::string(s) +
                              "' (expected silicone_oil, air_bubble or protein)");
}

Provenance parse_provenance(std::string_view s) {
  if (s == "real") return Provenance::kReal;
  if (s == "generated") return Provenance::kGenerated;
  throw std::invalid_argument("unknown provenance '" + std::string(s) + "' (expected real or generated)");
}

std::size_t DatasetManifest::count(ParticleClass c, Provenance p) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const auto& r) {
    return r.label == c && r.provenance == p;
  }));
}

std::size_t DatasetManifest::count(ParticleClass c) const {
  return count(c, Provenance::kReal) + count(c, Provenance::kGenerated);
}

std::filesystem::path DatasetManifest::resolve(const ManifestRecord& r) const {
  std::filesystem::path p(r.path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::vector<std::filesystem::path> DatasetManifest::resolved_paths() const {
  std::vector<std::filesystem::path> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(resolve(r));
  return out;
}

void DatasetManifest::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.path).second) {
      throw std::invalid_argument("manifest '" + split_name + "': duplicate path " + r.path);
    }
    if (r.label == ParticleClass::kProtein && r.provenance == Provenance::kGenerated) {
      throw std::invalid_argument("manifest '" + split_name +
                                  "': generated records are only allowed for minority classes (" +
                                  r.path + ")");
    }
  }
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

}  // namespace

std::string manifest_to_csv(const DatasetManifest& manifest) {
  std::string out = "path,label,provenance\n";
  for (const auto& r : manifest.records) {
    out += csv_field(r.path);
    out += ',';
    out += to_string(r.label);
    out += ',';
    out += to_string(r.provenance);
    out += '\n';
  }
  return out;
}

DatasetManifest manifest_from_csv(std::string_view text, std::string split_name) {
  DatasetManifest m;
  m.split_name = std::move(split_name);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (line_no == 1) {
      if (line != "path,label,provenance") {
        throw std::invalid_argument("manifest header must be 'path,label,provenance'");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw std::invalid_argument("manifest line " + std::to_string(line_no) + ": expected 3 fields");
    }
    m.records.push_back({fields[0], parse_class(fields[1]), parse_provenance(fields[2])});
  }
  if (line_no == 0) throw std::invalid_argument("manifest is empty");
  return m;
}

void write_manifest_csv(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  f << manifest_to_csv(manifest);
  if (!f) throw std::runtime_error("failed writing manifest '" + path.string() + "'");
}

DatasetManifest read_manifest_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read manifest '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  DatasetManifest m;
  try {
    m = manifest_from_csv(ss.str(), path.stem().string());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  m.base_dir = path.parent_path();
  return m;
}

void SplitSpec::validate() const {
  if (generated[class_index(ParticleClass::kProtein)] != 0) {
    throw std::invalid_argument("split '" + name + "': protein generated count must be 0");
  }
}

std::size_t SplitSpec::total() const {
  return std::accumulate(real.begin(), real.end(), std::size_t{0}) +
         std::accumulate(generated.begin(), generated.end(), std::size_t{0});
}

SplitSpec SplitSpec::scaled(double factor) const {
  if (!(factor > 0.0)) throw std::invalid_argument("split scale factor must be positive");
  SplitSpec s = *this;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    s.real[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(real[i] * factor)));
    s.generated[i] = static_cast<std::size_t>(std::llround(generated[i] * factor));
  }
  return s;
}

const std::vector<std::string>& SplitSpec::preset_names() {
  static const std::vector<std::string> names{"Real-0",  "Real-1",  "Real-2",  "Real-3", "Real-4",
                                              "Mixed-1", "Mixed-2", "Mixed-3", "Mixed-4"};
  return names;
}

SplitSpec SplitSpec::preset(std::string_view name) {
  // {silicone oil, air bubble, protein}
  constexpr std::array<std::size_t, 5> kProtein{1000, 2000, 5000, 10000, 20000};
  constexpr std::array<std::size_t, 5> kMinorityGenerated{0, 1000, 4000, 9000, 19000};
  const std::string n(name);
  for (std::size_t i = 0; i < 5; ++i) {
    if (n == "Real-" + std::to_string(i)) {
      return {n, {1000, 1000, kProtein[i]}, {0, 0, 0}};
    }
    if (i >= 1 && n == "Mixed-" + std::to_string(i)) {
      return {n, {1000, 1000, kProtein[i]}, {kMinorityGenerated[i], kMinorityGenerated[i], 0}};
    }
  }
  std::string valid;
  for (const auto& p : preset_names()) valid += (valid.empty() ? "" : ", ") + p;
  throw std::invalid_argument("unknown split preset '" + n + "' (valid presets: " + valid + ")");
}

namespace {

void draw(const DatasetManifest& pool, ParticleClass label, Provenance prov, std::size_t want,
          const std::string& split, std::uint64_t seed, std::vector<ManifestRecord>& out) {
  if (want == 0) return;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.records.size(); ++i) {
    const auto& r = pool.records[i];
    if (r.label == label && r.provenance == prov) candidates.push_back(i);
  }
  if (candidates.size() < want) {
    throw std::invalid_argument("insufficient " + std::string(to_string(prov)) + " pool for class " +
                                std::string(to_string(label)) + ": need " + std::to_string(want) +
                                ", have " + std::to_string(candidates.size()) + " (shortfall " +
                                std::to_string(want - candidates.size()) + ")");
  }
  Rng rng(derive_seed(seed, split + "/" + std::string(to_string(label)) + "/" +
                                std::string(to_string(prov))));
  // Partial Fisher-Yates: the first `want` slots become a uniform sample.
  for (std::size_t i = 0; i < want; ++i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(candidates.size() - 1)));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(want);
  std::sort(candidates.begin(), candidates.end());
  for (std::size_t i : candidates) {
    ManifestRecord r = pool.records[i];
    if (!pool.base_dir.empty()) r.path = pool.resolve(r).string();
    out.push_back(std::move(r));
  }
}

}  // namespace

DatasetManifest build_split(const SplitSpec& spec, const DatasetManifest& real_pool,
                            const DatasetManifest& generated_pool, std::uint64_t seed) {
  spec.validate();
  DatasetManifest out;
  out.split_name = spec.name;
  for (auto c : kAllClasses) {
    draw(real_pool, c, Provenance::kReal, spec.real[class_index(c)], spec.name, seed, out.records);
    draw(generated_pool, c, Provenance::kGenerated, spec.generated[class_index(c)], spec.name, seed,
         out.records);
  }
  out.validate();
  return out;
}

}  // namespace svp
