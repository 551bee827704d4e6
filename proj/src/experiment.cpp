#include "svp/experiment.hpp"

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "svp/checkpoint.hpp"
#include "svp/diffusion.hpp"
#include "svp/frechet.hpp"
#include "svp/procedural.hpp"
#include "svp/rng.hpp"

namespace svp {

namespace fs = std::filesystem;

fs::path default_data_root() {
  if (const char* env = std::getenv("SVP_DATA_ROOT"); env && *env) return env;
  return "svp_data";
}

fs::path content_addressed_run_dir(const fs::path& root, const std::string& command, const std::string& config) {
  std::ostringstream s;
  s << command << '-' << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(config);
  return root / "runs" / s.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = nlohmann::json{{"command", r.command},     {"config", r.config},       {"started", r.started},
                     {"finished", r.finished},   {"artifacts", r.artifacts}, {"tool_version", r.tool_version}};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("short write on " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_run_record(const fs::path& dir, const RunRecord& record) {
  fs::create_directories(dir);
  write_text_atomic(dir / "config.toml", record.config);
  write_text_atomic(dir / "run.json", nlohmann::json(record).dump(2) + "\n");
}

void write_scores_csv(const fs::path& path, const std::vector<ScoreRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "path,label,silicone_oil,air_bubble,protein\n" << std::setprecision(17);
  for (const auto& r : records) {
    if (r.path.find_first_of(",\"\n") != std::string::npos)
      throw std::invalid_argument("score path contains a CSV delimiter: " + r.path);
    out << r.path << ',' << to_string(kAllClasses[static_cast<std::size_t>(r.label)]);
    for (double s : r.scores) out << ',' << s;
    out << '\n';
  }
}

std::vector<ScoreRecord> read_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("path,label,", 0) != 0) throw std::runtime_error("unexpected score CSV header in " + path.string());
  std::vector<ScoreRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 5) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    ScoreRecord r;
    r.path = cells[0];
    r.label = static_cast<int>(class_index(parse_class(cells[1])));
    for (std::size_t k = 0; k < kNumClasses; ++k) r.scores[k] = std::stod(cells[2 + k]);
    out.push_back(std::move(r));
  }
  return out;
}

void save_classifier(const fs::path& path, const ClassifierNet& net, const ClassifierConfig& cfg) {
  Checkpoint ck;
  ck.meta["kind"] = "classifier";
  ck.meta["config"] = cfg;
  for (const auto& p : net.parameters()) ck.add("param/" + p.name, p.value);
  const auto& stats = net.batch_norm_stats();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    ck.add("bn/" + std::to_string(i) + "/mean", stats[i].running_mean);
    ck.add("bn/" + std::to_string(i) + "/var", stats[i].running_var);
  }
  write_checkpoint(path, ck);
}

LoadedClassifier load_classifier(const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.value("kind", "") != "classifier")
    throw CheckpointError("checkpoint " + path.string() + " does not hold a classifier");
  const auto cfg = ck.meta.at("config").get<ClassifierConfig>();
  ClassifierNet net(cfg.architecture, 0);
  for (auto& p : net.parameters()) {
    const auto& t = ck.get("param/" + p.name);
    if (t.shape() != p.value.shape()) throw CheckpointError("shape mismatch for " + p.name + " in " + path.string());
    p.value = t;
  }
  auto& stats = net.batch_norm_stats();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    stats[i].running_mean = ck.get("bn/" + std::to_string(i) + "/mean");
    stats[i].running_var = ck.get("bn/" + std::to_string(i) + "/var");
  }
  return {std::move(net), cfg};
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& report) {
  fs::create_directories(dir);
  write_text_atomic(dir / (stem + ".json"), nlohmann::json(report).dump(2) + "\n");
  write_text_atomic(dir / (stem + ".csv"), report_csv_header() + "\n" + report_csv_row(report) + "\n");
}

std::string demo_table_csv(const std::vector<DemoRow>& rows, const std::string& model) {
  std::ostringstream s;
  s << "model,split,silicone_oil,air_bubble,protein,macro,auprc\n" << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    s << model << ',' << r.split;
    for (std::size_t i = 0; i < kNumClasses; ++i) {
      s << ',';
      if (r.report.precision.defined[i]) s << 100.0 * r.report.precision.value[i];
      else s << "nan";
    }
    s << ',' << 100.0 * r.report.macro_precision << ',';
    if (std::isnan(r.report.auprc)) s << "nan";
    else s << 100.0 * r.report.auprc;
    s << '\n';
  }
  return s.str();
}

DemoResult run_desk_demo(const DemoOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (o.log) o.log(msg);
  };
  if (o.out_dir.empty()) throw std::invalid_argument("demo: out_dir is required");
  fs::create_directories(o.out_dir);
  const auto styles = default_class_styles();
  DemoResult result;

  log("generating procedural corpus");
  const DatasetManifest real_pool = generate_procedural_corpus(
      styles, std::vector<std::size_t>{o.minority_real, o.minority_real, o.majority_real},
      derive_seed(o.seed, "demo/real"), o.out_dir / "real");
  const DatasetManifest val = generate_procedural_corpus(
      styles, std::vector<std::size_t>(kNumClasses, o.val_per_class), derive_seed(o.seed, "demo/val"),
      o.out_dir / "val");

  // Phase 1: one tiny diffusion model per minority class.
  std::size_t max_generated = 0;
  for (std::size_t g : o.generated) max_generated = std::max(max_generated, g);
  const NoiseSchedule schedule = NoiseSchedule::linear(o.schedule_steps);
  DatasetManifest generated_pool;
  generated_pool.split_name = "generated";
  generated_pool.base_dir = o.out_dir / "generated";
  for (ParticleClass c : {ParticleClass::kSiliconeOil, ParticleClass::kAirBubble}) {
    const std::string name(to_string(c));
    DatasetManifest single;
    single.split_name = name;
    single.base_dir = real_pool.base_dir;
    for (const auto& r : real_pool.records)
      if (r.label == c) single.records.push_back(r);

    DenoiserNet<float> net(DenoiserConfig::tiny_preset(), derive_seed(o.seed, "demo/denoiser/" + name));
    TrainConfig tc;
    tc.batch_size = o.diffusion_batch;
    const int per_epoch = static_cast<int>((single.records.size() + tc.batch_size - 1) / tc.batch_size);
    tc.epochs = std::max(1, (o.diffusion_steps + per_epoch - 1) / per_epoch);
    tc.learning_rate = o.diffusion_lr;
    tc.seed = derive_seed(o.seed, "demo/diffusion/" + name);
    tc.snapshot_epochs = {tc.epochs};
    tc.fid_samples = 16;
    log("phase 1: training " + name + " denoiser for " + std::to_string(tc.epochs) + " epochs");
    const auto run_dir = o.out_dir / "diffusion" / name;
    const TrainResult tr = train(net, schedule, single, tc, run_dir);
    result.minority_fid.push_back(tr.log.fid.empty() ? std::nan("") : tr.log.fid.back().fid);

    log("phase 1: sampling " + std::to_string(max_generated) + " " + name + " images");
    const LoadedDenoiser ld = load_denoiser(tr.checkpoint, true);
    SampleOptions so;
    so.size = ld.net.config().image_size;
    so.seed = derive_seed(o.seed, "demo/sample/" + name);
    const SampleResult sr = sample(predictor_for(ld.net), ld.schedule, max_generated, so);
    fs::create_directories(generated_pool.base_dir / name);
    for (std::size_t i = 0; i < max_generated; ++i) {
      std::ostringstream file;
      file << name << "/gen_" << std::setw(5) << std::setfill('0') << i << ".png";
      save_png(generated_pool.base_dir / file.str(), to_raw_image(sr.images, i));
      generated_pool.records.push_back({file.str(), c, Provenance::kGenerated});
    }
  }
  write_manifest_csv(generated_pool.base_dir / "manifest.csv", generated_pool);

  // Phase 2: Real-style and Mixed-style splits, tiny classifiers, one shared validation set.
  std::vector<SplitSpec> specs;
  SplitSpec real_spec{"Real-desk", {o.minority_real, o.minority_real, o.majority_real}, {0, 0, 0}};
  specs.push_back(real_spec);
  for (std::size_t k = 0; k < o.generated.size(); ++k) {
    SplitSpec s = real_spec;
    s.name = "Mixed-desk-" + std::to_string(k + 1);
    s.generated = {o.generated[k], o.generated[k], 0};
    specs.push_back(s);
  }
  ClassifierConfig cc;
  cc.architecture = Architecture::kResNet8Tiny;
  cc.learning_rate = o.classifier_lr;
  cc.batch_size = o.classifier_batch;
  cc.epochs = o.classifier_epochs;
  cc.seed = derive_seed(o.seed, "demo/classifier");
  cc.image_size = o.classifier_image_size;
  const LabeledImages val_images = load_labeled(val, cc.image_size);
  fs::create_directories(o.out_dir / "splits");
  for (const auto& spec : specs) {
    const DatasetManifest split = build_split(spec, real_pool, generated_pool, derive_seed(o.seed, "demo/split"));
    write_manifest_csv(o.out_dir / "splits" / (spec.name + ".csv"), split);
    check_disjoint(split, val);
    log("phase 2: training classifier on " + spec.name + " (" + std::to_string(split.records.size()) + " images)");
    const ClassifierResult cr = train_classifier(cc, load_labeled(split, cc.image_size), val_images);
    write_report(o.out_dir / "reports", spec.name, cr.report);
    write_scores_csv(o.out_dir / "reports" / (spec.name + "_scores.csv"), cr.val_scores);
    result.rows.push_back({spec.name, spec.real, spec.generated, cr.report});
  }

  result.table_csv = o.out_dir / "comparison.csv";
  write_text_atomic(result.table_csv, demo_table_csv(result.rows, std::string(to_string(cc.architecture))));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace svp
