// svp: command-line front end for the toolkit.
//
// --config <file> takes key = value lines under a [<command>] section; the
// config.toml written into each run directory is such a file, so
// `svp --config <run>/config.toml` repeats a run. Flags given on the command
// line win over the file.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "svp/checkpoint.hpp"
#include "svp/classifier.hpp"
#include "svp/diffusion.hpp"
#include "svp/experiment.hpp"
#include "svp/frechet.hpp"
#include "svp/manifest.hpp"
#include "svp/procedural.hpp"

namespace fs = std::filesystem;
using namespace svp;

namespace {

// Actions run after parsing. A subcommand may be selected both on the command
// line and by a config section; it still runs once.
std::map<const CLI::App*, std::function<void()>>& actions() {
  static std::map<const CLI::App*, std::function<void()>> table;
  return table;
}
void on_run(const CLI::App* sub, std::function<void()> fn) { actions()[sub] = std::move(fn); }

struct Global {
  std::size_t jobs = 0;  // 0: hardware concurrency
  std::size_t cap(std::size_t wanted) const {
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    std::size_t limit = jobs == 0 ? hw : jobs;
    return std::max<std::size_t>(1, std::min(wanted, limit));
  }
};

// Output-directory handling shared by commands that create a run directory.
struct RunDirOptions {
  std::string out;
  bool resume = false;
  bool force = false;
};

void add_run_dir_options(CLI::App* sub, RunDirOptions& o, bool with_resume) {
  sub->add_option("--out", o.out, "Output directory (default: $SVP_DATA_ROOT/runs/<command>-<config hash>)");
  sub->add_flag("--force", o.force, "Reuse an existing output directory");
  if (with_resume) sub->add_flag("--resume", o.resume, "Continue the run found in the output directory");
}

// The resolved option snapshot written to config.toml. Keys that only steer
// where output goes are left out of the hash so --out does not change it.
std::string resolved_config(const CLI::App* sub) {
  std::string text = sub->config_to_str(true, false);
  std::istringstream in(text);
  std::string kept = "[" + sub->get_name() + "]\n";
  for (std::string line; std::getline(in, line);) {
    // resume/force describe the invocation, not the configuration. Empty strings
    // are unset options; writing them would trip validators on re-run.
    if (line.rfind("config=", 0) == 0 || line.rfind("resume=", 0) == 0 || line.rfind("force=", 0) == 0) continue;
    if (line.size() > 3 && line.ends_with("=\"\"")) continue;
    kept += line;
    kept += '\n';
  }
  return kept;
}

std::string hashed_part(const std::string& config) {
  std::istringstream in(config);
  std::string kept;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("out=", 0) == 0) continue;
    kept += line;
    kept += '\n';
  }
  return kept;
}

fs::path prepare_run_dir(const std::string& command, const std::string& config, const RunDirOptions& o) {
  fs::path dir = o.out.empty() ? content_addressed_run_dir(default_data_root(), command, hashed_part(config))
                               : fs::path(o.out);
  if (o.resume) {
    if (!fs::exists(dir)) throw std::runtime_error("--resume: no run directory at " + dir.string());
    return dir;
  }
  if (fs::exists(dir / "run.json") && !o.force)
    throw std::runtime_error("run directory " + dir.string() +
                             " already holds a finished run; pass --force to overwrite or --resume to continue");
  fs::create_directories(dir);
  return dir;
}

struct Record {
  RunRecord r;
  fs::path dir;
  Record(std::string command, std::string config) {
    r.command = std::move(command);
    r.config = std::move(config);
    r.started = utc_timestamp();
  }
  void artifact(const std::string& key, const fs::path& p) {
    if (!fs::exists(p)) throw std::runtime_error("expected artifact missing: " + p.string());
    r.artifacts[key] = p.string();
  }
  void finish() {
    r.finished = utc_timestamp();
    write_run_record(dir, r);
  }
};

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void print_count_table(std::ostream& os, const std::vector<DatasetManifest>& manifests) {
  os << std::left << std::setw(12) << "split";
  for (auto c : kAllClasses) os << std::setw(18) << to_string(c);
  os << "total\n";
  for (const auto& m : manifests) {
    os << std::setw(12) << m.split_name;
    for (auto c : kAllClasses) {
      std::string cell = std::to_string(m.count(c, Provenance::kReal));
      if (auto g = m.count(c, Provenance::kGenerated); g > 0) cell += " + " + std::to_string(g);
      os << std::setw(18) << cell;
    }
    os << m.records.size() << '\n';
  }
}

DatasetManifest read_manifest_checked(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("manifest not found: " + path);
  return read_manifest_csv(path);
}

// ---------------------------------------------------------------- make-procedural

struct ProceduralArgs {
  std::string out;
  std::size_t n = 100;
  std::vector<std::size_t> counts;
  std::uint64_t seed = 0;
};

void setup_make_procedural(CLI::App& app, ProceduralArgs& a) {
  auto* sub = app.add_subcommand("make-procedural", "Render a synthetic three-class particle corpus");
  sub->configurable();
  sub->add_option("--out", a.out, "Corpus directory")->required();
  sub->add_option("--n", a.n, "Images per class")->check(CLI::PositiveNumber);
  sub->add_option("--counts", a.counts, "Per-class counts silicone_oil,air_bubble,protein (overrides --n)")
      ->delimiter(',')
      ->expected(3);
  sub->add_option("--seed", a.seed, "Corpus seed");
  on_run(sub, [sub, &a] {
    Record rec("make-procedural", resolved_config(sub));
    rec.dir = a.out;
    auto styles = default_class_styles();
    DatasetManifest m;
    if (a.counts.empty()) {
      m = generate_procedural_corpus(styles, a.n, a.seed, a.out);
    } else {
      // Styles are not in class order; map counts by label.
      std::vector<std::size_t> per_style;
      for (const auto& s : styles) per_style.push_back(a.counts[class_index(s.label)]);
      m = generate_procedural_corpus(styles, per_style, a.seed, a.out);
    }
    m.split_name = "corpus";
    print_count_table(std::cout, {m});
    rec.artifact("manifest", fs::path(a.out) / "manifest.csv");
    rec.finish();
  });
}

// ---------------------------------------------------------------- build-dataset

struct BuildArgs {
  std::vector<std::string> presets;
  std::string real_pool;
  std::string generated_pool;
  std::uint64_t seed = 0;
  double scale = 1.0;
  RunDirOptions dir;
};

void setup_build_dataset(CLI::App& app, BuildArgs& a) {
  auto* sub = app.add_subcommand("build-dataset", "Draw training-split manifests from real and generated pools");
  sub->configurable();
  std::vector<std::string> valid = SplitSpec::preset_names();
  valid.push_back("all");
  sub->add_option("--preset", a.presets, "Split preset(s), or 'all'")
      ->required()
      ->delimiter(',')
      ->check(CLI::IsMember(valid));
  sub->add_option("--real-pool", a.real_pool, "Manifest of real images")->required();
  sub->add_option("--generated-pool", a.generated_pool, "Manifest of generated images");
  sub->add_option("--seed", a.seed, "Sampling seed");
  sub->add_option("--scale", a.scale, "Multiply every count (desk-scale runs)")->check(CLI::PositiveNumber);
  add_run_dir_options(sub, a.dir, false);
  on_run(sub, [sub, &a] {
    const std::string config = resolved_config(sub);
    Record rec("build-dataset", config);
    rec.dir = prepare_run_dir("build-dataset", config, a.dir);
    const auto real = read_manifest_checked(a.real_pool);
    DatasetManifest gen;
    if (!a.generated_pool.empty()) gen = read_manifest_checked(a.generated_pool);
    std::vector<std::string> names;
    for (const auto& p : a.presets) {
      if (p == "all") {
        for (const auto& n : SplitSpec::preset_names()) names.push_back(n);
      } else {
        names.push_back(p);
      }
    }
    std::vector<DatasetManifest> built;
    for (const auto& name : names) {
      SplitSpec spec = SplitSpec::preset(name);
      if (a.scale != 1.0) spec = spec.scaled(a.scale);
      auto m = build_split(spec, real, gen, a.seed);
      const fs::path file = rec.dir / (name + ".csv");
      write_manifest_csv(file, m);
      rec.artifact(name, file);
      built.push_back(std::move(m));
    }
    print_count_table(std::cout, built);
    rec.finish();
  });
}

// ---------------------------------------------------------------- train-diffusion

struct DiffusionArgs {
  std::string manifest;
  std::string label;
  std::string denoiser = "default";
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int epochs = 1000;
  std::size_t batch_size = 128;
  double lr = 1e-4;
  std::string optimizer = "adam";
  double weight_decay = 0.0;
  double ema_decay = 0.995;
  bool no_ema = false;
  std::uint64_t seed = 0;
  std::vector<int> snapshot_epochs;
  std::string reduction = "mean";
  std::string variance = "posterior";
  std::size_t fid_samples = 100;
  std::string extractor = "pixel_stats";
  int checkpoint_every = 0;
  RunDirOptions dir;
};

SamplerVariance parse_variance(const std::string& s) {
  if (s == "posterior") return SamplerVariance::kPosterior;
  if (s == "beta") return SamplerVariance::kBeta;
  throw std::invalid_argument("unknown variance '" + s + "' (posterior, beta)");
}

void setup_train_diffusion(CLI::App& app, DiffusionArgs& a) {
  auto* sub = app.add_subcommand("train-diffusion", "Train a per-class diffusion model");
  sub->configurable();
  sub->add_option("--manifest", a.manifest, "Single-class training manifest")->required();
  sub->add_option("--class", a.label, "Keep only records of this class")
      ->check(CLI::IsMember({"silicone_oil", "air_bubble", "protein"}));
  sub->add_option("--denoiser", a.denoiser, "Denoiser preset")->check(CLI::IsMember({"default", "tiny"}));
  sub->add_option("--steps", a.steps, "Diffusion steps T")->check(CLI::PositiveNumber);
  sub->add_option("--beta-start", a.beta_start, "beta at t = 1");
  sub->add_option("--beta-end", a.beta_end, "beta at t = T");
  sub->add_option("--epochs", a.epochs, "Training epochs")->check(CLI::PositiveNumber);
  sub->add_option("--batch-size", a.batch_size, "Batch size")->check(CLI::PositiveNumber);
  sub->add_option("--lr", a.lr, "Learning rate");
  sub->add_option("--optimizer", a.optimizer, "adam or adamw")->check(CLI::IsMember({"adam", "adamw"}));
  sub->add_option("--weight-decay", a.weight_decay, "Weight decay");
  sub->add_option("--ema-decay", a.ema_decay, "EMA decay of the sampling weights");
  sub->add_flag("--no-ema", a.no_ema, "Sample from the live weights");
  sub->add_option("--seed", a.seed, "Run seed");
  sub->add_option("--snapshot-epochs", a.snapshot_epochs, "Epochs with FID and sample grids")->delimiter(',');
  sub->add_option("--reduction", a.reduction, "Loss reduction")->check(CLI::IsMember({"mean", "sum"}));
  sub->add_option("--variance", a.variance, "Sampler variance")->check(CLI::IsMember({"posterior", "beta"}));
  sub->add_option("--fid-samples", a.fid_samples, "Samples per snapshot FID");
  sub->add_option("--extractor", a.extractor, "FID feature extractor")
      ->check(CLI::IsMember({"pixel_stats", "small_cnn"}));
  sub->add_option("--checkpoint-every", a.checkpoint_every, "Extra checkpoint period in epochs (0: off)");
  add_run_dir_options(sub, a.dir, true);
  on_run(sub, [sub, &a] {
    const std::string config = resolved_config(sub);
    Record rec("train-diffusion", config);
    rec.dir = prepare_run_dir("train-diffusion", config, a.dir);

    auto manifest = read_manifest_checked(a.manifest);
    if (!a.label.empty()) {
      const auto keep = parse_class(a.label);
      std::erase_if(manifest.records, [&](const ManifestRecord& r) { return r.label != keep; });
    }
    if (manifest.records.empty()) throw std::runtime_error("no training images selected");

    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.lr;
    cfg.optimizer = parse_optimizer(a.optimizer);
    cfg.weight_decay = a.weight_decay;
    cfg.ema_decay = a.no_ema ? std::nullopt : std::optional<double>(a.ema_decay);
    cfg.seed = a.seed;
    cfg.snapshot_epochs = a.snapshot_epochs;
    cfg.reduction = a.reduction == "sum" ? ad::Reduction::kSum : ad::Reduction::kMean;
    cfg.variance = parse_variance(a.variance);
    cfg.fid_samples = a.fid_samples;
    cfg.extractor = a.extractor;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.validate();

    const auto schedule = NoiseSchedule::linear(a.steps, a.beta_start, a.beta_end);
    DenoiserNet<float> net(DenoiserConfig::from_preset(a.denoiser), derive_seed(a.seed, "denoiser/init"));

    TrainRunOptions opts;
    opts.resume = a.dir.resume;
    opts.extra_meta["class"] = std::string(to_string(manifest.records.front().label));
    opts.on_epoch = [&](const EpochRecord& e) {
      std::cerr << "epoch " << e.epoch << "/" << cfg.epochs << "  loss " << fixed(e.loss, 5) << "  "
                << fixed(e.seconds, 1) << " s\n";
    };
    const auto result = train(net, schedule, manifest, cfg, rec.dir, opts);
    rec.artifact("checkpoint", result.checkpoint);
    rec.artifact("train_log", rec.dir / "train_log.csv");
    rec.artifact("fid_checkpoints", rec.dir / "fid_checkpoints.csv");
    rec.finish();
  });
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint;
  std::size_t n = 100;
  std::size_t trajectory = 0;
  std::uint64_t seed = 0;
  std::size_t batch = 16;
  std::string variance = "posterior";
  bool raw_weights = false;
  std::string label;
  RunDirOptions dir;
};

void setup_sample(CLI::App& app, SampleArgs& a) {
  auto* sub = app.add_subcommand("sample", "Generate images from a diffusion checkpoint");
  sub->configurable();
  sub->add_option("--checkpoint", a.checkpoint, "Denoiser checkpoint")->required();
  sub->add_option("--n", a.n, "Number of images")->check(CLI::PositiveNumber);
  sub->add_option("--trajectory", a.trajectory, "Snapshots per trajectory row (0: none)");
  sub->add_option("--seed", a.seed, "Sampling seed");
  sub->add_option("--batch", a.batch, "Images denoised together")->check(CLI::PositiveNumber);
  sub->add_option("--variance", a.variance, "Sampler variance")->check(CLI::IsMember({"posterior", "beta"}));
  sub->add_flag("--raw-weights", a.raw_weights, "Use live weights even when an EMA shadow is stored");
  sub->add_option("--class", a.label, "Label for the generated manifest (default: from the checkpoint)")
      ->check(CLI::IsMember({"silicone_oil", "air_bubble", "protein"}));
  add_run_dir_options(sub, a.dir, false);
  on_run(sub, [sub, &a] {
    const std::string config = resolved_config(sub);
    // Validate the checkpoint before creating any directory.
    auto loaded = load_denoiser(a.checkpoint, !a.raw_weights);
    Record rec("sample", config);
    rec.dir = prepare_run_dir("sample", config, a.dir);

    SampleOptions so;
    so.channels = loaded.net.config().in_channels;
    so.size = loaded.net.config().image_size;
    so.seed = a.seed;
    so.variance = parse_variance(a.variance);
    so.batch = a.batch;
    if (a.trajectory > 0) so.snapshot_steps = trajectory_steps(loaded.schedule.steps(), a.trajectory);
    const auto result = sample(predictor_for(loaded.net), loaded.schedule, a.n, so);

    const fs::path img_dir = rec.dir / "samples";
    fs::create_directories(img_dir);
    DatasetManifest gen;
    gen.split_name = "generated";
    std::string label = a.label.empty() ? loaded.meta.value("class", std::string{}) : a.label;
    for (std::size_t i = 0; i < a.n; ++i) {
      std::ostringstream name;
      name << "sample_" << std::setw(5) << std::setfill('0') << i << ".png";
      save_png(img_dir / name.str(), to_raw_image(result.images, i));
      if (!label.empty())
        gen.records.push_back({(fs::path("samples") / name.str()).string(), parse_class(label), Provenance::kGenerated});
    }
    rec.r.artifacts["samples"] = img_dir.string();
    save_grid_png(rec.dir / "samples_grid.png", result.images, 10);
    rec.artifact("samples_grid", rec.dir / "samples_grid.png");
    if (!label.empty()) {
      write_manifest_csv(rec.dir / "generated.csv", gen);
      rec.artifact("manifest", rec.dir / "generated.csv");
    }

    if (a.trajectory > 0) {
      // One row per image (at most six), one column per snapshot, noise to final.
      const auto& tr = result.trajectory;
      const std::size_t rows = std::min<std::size_t>(a.n, 6);
      const std::size_t k = tr.snapshots.size();
      const auto& shape = result.images.data.shape();
      Tensor<float> grid({rows * k, shape[1], shape[2], shape[3]});
      const std::size_t per = shape[1] * shape[2] * shape[3];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < k; ++c)
          for (std::size_t e = 0; e < per; ++e) {
            float v = tr.snapshots[c].data.data()[r * per + e];
            grid.data()[(r * k + c) * per + e] = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
          }
      save_grid_png(rec.dir / "trajectory.png", ImageTensor{std::move(grid), ValueRange::kUnit}, k);
      rec.artifact("trajectory", rec.dir / "trajectory.png");
      std::ofstream steps(rec.dir / "trajectory_steps.csv");
      steps << "column,timestep\n";
      for (std::size_t c = 0; c < k; ++c) steps << c << ',' << tr.timesteps[c] << '\n';
    }
    std::cout << "wrote " << a.n << " samples to " << img_dir.string() << '\n';
    rec.finish();
  });
}

// ---------------------------------------------------------------- fid

struct FidArgs {
  std::string real;
  std::string generated;
  std::size_t n_gen = 100;
  std::string extractor = "pixel_stats";
  std::string features;
  std::string real_features;
};

std::vector<fs::path> image_paths(const std::string& where) {
  if (!fs::exists(where)) throw std::runtime_error("no such file or directory: " + where);
  if (fs::is_directory(where)) return list_images(where);
  return read_manifest_csv(where).resolved_paths();
}

void setup_fid(CLI::App& app, FidArgs& a) {
  auto* sub = app.add_subcommand("fid", "Frechet distance between two image sets");
  sub->configurable();
  sub->add_option("--real", a.real, "Real images: manifest CSV or directory");
  sub->add_option("--generated", a.generated, "Generated image directory");
  sub->add_option("--n-gen", a.n_gen, "Generated images used (first by file name)");
  sub->add_option("--extractor", a.extractor, "Feature extractor")
      ->check(CLI::IsMember({"pixel_stats", "small_cnn", "imported"}));
  sub->add_option("--features", a.features, "Generated-set embeddings (imported extractor)");
  sub->add_option("--real-features", a.real_features, "Real-set embeddings (imported extractor)");
  on_run(sub, [&a] {
    FidReport rep;
    if (a.extractor == "imported") {
      if (a.features.empty() || a.real_features.empty())
        throw CLI::ValidationError("--extractor imported needs --features and --real-features");
      const auto gen = load_embeddings(a.features);
      const auto real = load_embeddings(a.real_features, static_cast<std::size_t>(gen.features.cols()));
      rep.extractor = gen.extractor_name.empty() ? "imported" : gen.extractor_name;
      rep.n_real = static_cast<std::size_t>(real.features.rows());
      rep.n_gen = static_cast<std::size_t>(gen.features.rows());
      rep.fid = frechet_distance(gaussian_stats(real.features), gaussian_stats(gen.features));
    } else {
      if (a.real.empty() || a.generated.empty())
        throw CLI::ValidationError("--real and --generated are required");
      const auto extractor = make_extractor(a.extractor);
      auto gen_paths = image_paths(a.generated);
      if (gen_paths.size() < a.n_gen)
        throw std::runtime_error(a.generated + " holds " + std::to_string(gen_paths.size()) + " images, --n-gen is " +
                                 std::to_string(a.n_gen));
      gen_paths.resize(a.n_gen);
      rep = fid_from_images(load_standardized(image_paths(a.real)), load_standardized(gen_paths), *extractor);
    }
    std::cout << "extractor,n_real,n_gen,fid\n"
              << rep.extractor << ',' << rep.n_real << ',' << rep.n_gen << ',' << std::setprecision(10) << rep.fid
              << '\n';
  });
}

// ---------------------------------------------------------------- train-classifier / grid

struct ClassifierArgs {
  std::string train;
  std::string val;
  std::string arch = "resnet18";
  std::string optimizer = "adam";
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::string grid = "full";
  RunDirOptions dir;
};

void add_classifier_options(CLI::App* sub, ClassifierArgs& a, bool single) {
  sub->add_option("--train", a.train, "Training manifest")->required();
  sub->add_option("--val", a.val, "Validation manifest")->required();
  sub->add_option("--arch", a.arch, "Architecture")->check(CLI::IsMember({"resnet18", "resnet50", "resnet8_tiny"}));
  sub->add_option("--epochs", a.epochs, "Epochs per run")->check(CLI::PositiveNumber);
  sub->add_option("--seed", a.seed, "Run seed");
  sub->add_option("--image-size", a.image_size, "Input edge length")->check(CLI::PositiveNumber);
  if (single) {
    sub->add_option("--optimizer", a.optimizer, "adam or adamw")->check(CLI::IsMember({"adam", "adamw"}));
    sub->add_option("--lr", a.lr, "Learning rate");
    sub->add_option("--weight-decay", a.weight_decay, "Weight decay");
    sub->add_option("--batch-size", a.batch_size, "Batch size")->check(CLI::PositiveNumber);
  } else {
    sub->add_option("--grid", a.grid, "Hyperparameter grid")->check(CLI::IsMember({"full", "smoke"}));
  }
  add_run_dir_options(sub, a.dir, false);
}

ClassifierConfig classifier_config(const ClassifierArgs& a) {
  ClassifierConfig c;
  c.architecture = parse_architecture(a.arch);
  c.optimizer = parse_optimizer(a.optimizer);
  c.learning_rate = a.lr;
  c.weight_decay = a.weight_decay;
  c.batch_size = a.batch_size;
  c.epochs = a.epochs;
  c.seed = a.seed;
  c.image_size = a.image_size;
  c.validate();
  return c;
}

std::pair<LabeledImages, LabeledImages> load_train_val(const ClassifierArgs& a) {
  const auto train = read_manifest_checked(a.train);
  const auto val = read_manifest_checked(a.val);
  train.validate();
  val.validate();
  check_disjoint(train, val);
  return {load_labeled(train, a.image_size), load_labeled(val, a.image_size)};
}

void print_report(const EvalReport& r) {
  std::cout << report_csv_header() << '\n' << report_csv_row(r) << '\n';
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

void setup_train_classifier(CLI::App& app, ClassifierArgs& a) {
  auto* sub = app.add_subcommand("train-classifier", "Train and evaluate one classifier");
  sub->configurable();
  add_classifier_options(sub, a, true);
  on_run(sub, [sub, &a] {
    const std::string config = resolved_config(sub);
    Record rec("train-classifier", config);
    const auto cfg = classifier_config(a);
    const auto [train, val] = load_train_val(a);
    rec.dir = prepare_run_dir("train-classifier", config, a.dir);
    const auto result = train_classifier(cfg, train, val);

    save_classifier(rec.dir / "classifier.svpckpt", result.net, cfg);
    write_report(rec.dir, "report", result.report);
    write_scores_csv(rec.dir / "val_scores.csv", result.val_scores);
    {
      std::ofstream h(rec.dir / "history.csv");
      h << "epoch,train_loss,train_accuracy,val_selection\n" << std::setprecision(10);
      for (const auto& e : result.history)
        h << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_selection << '\n';
    }
    for (const char* f : {"classifier.svpckpt", "report.json", "report.csv", "val_scores.csv", "history.csv"})
      rec.artifact(f, rec.dir / f);
    print_report(result.report);
    rec.finish();
  });
}

void setup_grid(CLI::App& app, ClassifierArgs& a, const Global& g) {
  auto* sub = app.add_subcommand("grid", "Hyperparameter grid search");
  sub->configurable();
  add_classifier_options(sub, a, false);
  on_run(sub, [sub, &a, &g] {
    const std::string config = resolved_config(sub);
    Record rec("grid", config);
    const auto base = classifier_config(a);
    const auto grid = GridSpec::from_name(a.grid);
    const auto [train, val] = load_train_val(a);
    rec.dir = prepare_run_dir("grid", config, a.dir);
    const std::size_t total = grid.cardinality();
    auto reports = grid_search(grid, base, train, val, g.cap(total), [&](std::size_t done, const EvalReport& r) {
      std::cerr << "[" << done << "/" << total << "] " << to_string(r.config.optimizer) << " lr "
                << r.config.learning_rate << " wd " << r.config.weight_decay << " batch " << r.config.batch_size
                << "  macro " << fixed(100.0 * r.macro_precision, 2) << '\n';
    });
    write_grid_results(rec.dir / "grid_results.csv", reports);
    write_report(rec.dir, "best_report", reports.front());
    for (const char* f : {"grid_results.csv", "best_report.json", "best_report.csv"}) rec.artifact(f, rec.dir / f);
    print_report(reports.front());
    rec.finish();
  });
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model;
  std::string manifest;
  std::string scores;
  RunDirOptions dir;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
  auto* sub = app.add_subcommand("eval", "Evaluate a classifier on a manifest, or re-score a score CSV");
  sub->configurable();
  auto* model = sub->add_option("--model", a.model, "Classifier checkpoint");
  auto* manifest = sub->add_option("--manifest", a.manifest, "Evaluation manifest");
  auto* scores = sub->add_option("--scores", a.scores, "Existing score CSV");
  model->needs(manifest);
  manifest->needs(model);
  scores->excludes(model);
  add_run_dir_options(sub, a.dir, false);
  on_run(sub, [sub, &a] {
    if (a.scores.empty() && a.model.empty()) throw CLI::ValidationError("give --model with --manifest, or --scores");
    const std::string config = resolved_config(sub);
    Record rec("eval", config);
    std::vector<ScoreRecord> records;
    ClassifierConfig cfg;
    if (!a.scores.empty()) {
      records = read_scores_csv(a.scores);
    } else {
      auto loaded = load_classifier(a.model);
      cfg = loaded.config;
      const auto data = load_labeled(read_manifest_checked(a.manifest), cfg.image_size);
      records = score_images(loaded.net, data);
    }
    rec.dir = prepare_run_dir("eval", config, a.dir);
    const auto report = evaluate(records, cfg);
    write_report(rec.dir, "report", report);
    write_scores_csv(rec.dir / "scores.csv", records);
    for (const char* f : {"report.json", "report.csv", "scores.csv"}) rec.artifact(f, rec.dir / f);
    print_report(report);
    rec.finish();
  });
}

// ---------------------------------------------------------------- export-misclassified

struct ExportArgs {
  std::string scores;
  std::string out;
  std::size_t top_k = 5;
  std::string base_dir;
};

void setup_export(CLI::App& app, ExportArgs& a) {
  auto* sub = app.add_subcommand("export-misclassified", "Copy the most confident errors per confusion cell");
  sub->configurable();
  sub->add_option("--scores", a.scores, "Score CSV")->required();
  sub->add_option("--out", a.out, "Output directory")->required();
  sub->add_option("--top-k", a.top_k, "Images per (true, predicted) cell");
  sub->add_option("--base-dir", a.base_dir, "Directory relative score paths resolve against");
  on_run(sub, [sub, &a] {
    Record rec("export-misclassified", resolved_config(sub));
    rec.dir = a.out;
    const auto records = read_scores_csv(a.scores);
    const auto written = export_misclassified(records, confusion_matrix(records), a.out, a.top_k, a.base_dir);
    rec.artifact("index", fs::path(a.out) / "misclassified.csv");
    std::cout << "exported " << written.size() << " images\n";
    rec.finish();
  });
}

// ---------------------------------------------------------------- demo

struct DemoArgs {
  std::uint64_t seed = 2024;
  int diffusion_steps = 1500;
  int classifier_epochs = 12;
  RunDirOptions dir;
};

void setup_demo(CLI::App& app, DemoArgs& a) {
  auto* sub = app.add_subcommand("demo", "Desk-scale Real vs Mixed experiment on a procedural corpus");
  sub->configurable();
  sub->add_option("--seed", a.seed, "Run seed");
  sub->add_option("--diffusion-steps", a.diffusion_steps, "Optimizer steps per minority-class model")
      ->check(CLI::PositiveNumber);
  sub->add_option("--classifier-epochs", a.classifier_epochs, "Classifier epochs")->check(CLI::PositiveNumber);
  add_run_dir_options(sub, a.dir, false);
  on_run(sub, [sub, &a] {
    const std::string config = resolved_config(sub);
    Record rec("demo", config);
    rec.dir = prepare_run_dir("demo", config, a.dir);
    DemoOptions o;
    o.out_dir = rec.dir;
    o.seed = a.seed;
    o.diffusion_steps = a.diffusion_steps;
    o.classifier_epochs = a.classifier_epochs;
    o.log = [](const std::string& line) { std::cerr << line << '\n'; };
    const auto result = run_desk_demo(o);
    rec.artifact("comparison", result.table_csv);
    std::cout << demo_table_csv(result.rows, "resnet8_tiny");
    rec.finish();
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle-image toolkit: diffusion augmentation and classification"};
  app.require_subcommand(1);
  // Subcommands inherit this, so config_to_str records every default.
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Config file (key = value under [<command>])");
  app.fallthrough();
  Global global;
  app.add_option("--jobs", global.jobs, "Cap on worker threads (0: all cores)");
  app.set_version_flag("--version", std::string(kToolVersion));

  ProceduralArgs procedural;
  BuildArgs build;
  DiffusionArgs diffusion;
  SampleArgs sampling;
  FidArgs fid;
  ClassifierArgs single, grid;
  EvalArgs eval;
  ExportArgs exporting;
  DemoArgs demo;
  setup_make_procedural(app, procedural);
  setup_build_dataset(app, build);
  setup_train_diffusion(app, diffusion);
  setup_sample(app, sampling);
  setup_fid(app, fid);
  setup_train_classifier(app, single);
  setup_grid(app, grid, global);
  setup_eval(app, eval);
  setup_export(app, exporting);
  setup_demo(app, demo);

  try {
    app.parse(argc, argv);
    const auto selected = app.get_subcommands();
    actions().at(selected.front())();
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
