#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "svp/classifier.hpp"
#include "svp/metrics.hpp"

namespace svp {

inline constexpr const char* kToolVersion = "0.1.0";

// Data root: $SVP_DATA_ROOT when set, else ./svp_data.
std::filesystem::path default_data_root();

// `<root>/runs/<command>-<16 hex digits of fnv1a64(config)>`.
std::filesystem::path content_addressed_run_dir(const std::filesystem::path& root, const std::string& command,
                                                const std::string& resolved_config);

// Everything needed to re-run a command, written as run.json at the end.
struct RunRecord {
  std::string command;
  std::string config;  // resolved key = value snapshot, loadable with --config
  std::string started;
  std::string finished;
  std::map<std::string, std::string> artifacts;
  std::string tool_version = kToolVersion;
};

std::string utc_timestamp();
void to_json(nlohmann::json& j, const RunRecord& r);
// Writes `<dir>/run.json` and `<dir>/config.toml` via temp file + rename.
void write_run_record(const std::filesystem::path& dir, const RunRecord& record);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// Score CSV: path,label,silicone_oil,air_bubble,protein.
void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path);

// Classifier checkpoints: parameters, BatchNorm running statistics
// ("bn/<i>/mean", "bn/<i>/var") and meta.kind = "classifier".
void save_classifier(const std::filesystem::path& path, const ClassifierNet& net, const ClassifierConfig& cfg);
struct LoadedClassifier {
  ClassifierNet net;
  ClassifierConfig config;
};
LoadedClassifier load_classifier(const std::filesystem::path& path);

void write_report(const std::filesystem::path& dir, const std::string& stem, const EvalReport& report);

// Desk-scale two-phase experiment on a procedural corpus.
struct DemoOptions {
  std::filesystem::path out_dir;
  std::uint64_t seed = 2024;
  std::size_t minority_real = 10;       // per minority class
  std::size_t majority_real = 200;      // 20:1 imbalance
  std::size_t val_per_class = 30;
  std::vector<std::size_t> generated = {40, 90};  // one Mixed-style split per entry
  int diffusion_steps = 1500;           // optimizer steps per class model
  int schedule_steps = 1000;
  std::size_t diffusion_batch = 10;
  double diffusion_lr = 2e-3;
  int classifier_epochs = 12;
  std::size_t classifier_batch = 32;
  double classifier_lr = 2e-3;
  std::size_t classifier_image_size = 32;
  std::function<void(const std::string&)> log;
};

struct DemoRow {
  std::string split;
  std::array<std::size_t, kNumClasses> real{};
  std::array<std::size_t, kNumClasses> generated{};
  EvalReport report;
};

struct DemoResult {
  std::vector<DemoRow> rows;
  std::filesystem::path table_csv;
  std::vector<double> minority_fid;  // per minority class, final model vs its real images
  double seconds = 0.0;
};

DemoResult run_desk_demo(const DemoOptions& options);

// Header: model,split,silicone_oil,air_bubble,protein,macro,auprc (percentages).
std::string demo_table_csv(const std::vector<DemoRow>& rows, const std::string& model);

}  // namespace svp
