#include "svp/classifier.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "svp/parameters.hpp"
#include "svp/rng.hpp"

namespace svp {

namespace fs = std::filesystem;

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::kResNet18: return "resnet18";
    case Architecture::kResNet50: return "resnet50";
    case Architecture::kResNet8Tiny: return "resnet8_tiny";
  }
  return "?";
}

Architecture parse_architecture(std::string_view s) {
  if (s == "resnet18") return Architecture::kResNet18;
  if (s == "resnet50") return Architecture::kResNet50;
  if (s == "resnet8_tiny") return Architecture::kResNet8Tiny;
  throw std::invalid_argument("unknown architecture '" + std::string(s) + "' (valid: resnet18, resnet50, resnet8_tiny)");
}

void ClassifierConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("classifier config: learning_rate must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("classifier config: weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("classifier config: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("classifier config: epochs must be >= 1");
  if (image_size < 16) throw std::invalid_argument("classifier config: image_size must be >= 16");
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = nlohmann::json{{"architecture", std::string(to_string(c.architecture))},
                     {"optimizer", std::string(to_string(c.optimizer))},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"image_size", c.image_size}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  j.at("image_size").get_to(c.image_size);
}

EvalReport evaluate(std::span<const ScoreRecord> records, const ClassifierConfig& config) {
  EvalReport r;
  r.config = config;
  r.confusion = confusion_matrix(records);
  r.precision = precision_per_class(r.confusion);
  r.macro_precision = macro_precision_lenient(r.precision, &r.warnings);
  try {
    r.auprc = auprc(records);
  } catch (const std::domain_error& e) {
    r.auprc = std::numeric_limits<double>::quiet_NaN();
    r.warnings.push_back(e.what());
  }
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json precision = nlohmann::json::object();
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    precision[std::string(to_string(kAllClasses[i]))] =
        r.precision.defined[i] ? nlohmann::json(r.precision.value[i]) : nlohmann::json(nullptr);
  }
  j = nlohmann::json{{"confusion", r.confusion.counts},
                     {"precision", precision},
                     {"macro_precision", r.macro_precision},
                     {"auprc", std::isnan(r.auprc) ? nlohmann::json(nullptr) : nlohmann::json(r.auprc)},
                     {"config", r.config},
                     {"best_epoch", r.best_epoch},
                     {"warnings", r.warnings}};
}

std::string report_csv_header() { return "silicone_oil,air_bubble,protein,macro,auprc"; }

std::string report_csv_row(const EvalReport& r) {
  std::ostringstream s;
  s << std::setprecision(10);
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (r.precision.defined[i]) s << r.precision.value[i];
    else s << "nan";
    s << ',';
  }
  s << r.macro_precision << ',';
  if (std::isnan(r.auprc)) s << "nan";
  else s << r.auprc;
  return s.str();
}

namespace detail {

struct ConvBn {
  std::size_t weight = 0, gamma = 0, beta = 0, stats = 0;
  std::size_t stride = 1, pad = 0;
};

struct Block {
  std::vector<ConvBn> convs;  // 2 (basic) or 3 (bottleneck)
  bool has_projection = false;
  ConvBn projection;
};

struct ClassifierLayout {
  std::vector<ParameterSpec> specs;
  std::vector<std::size_t> stat_channels;
  ConvBn stem;
  bool max_pool = false;
  std::vector<Block> blocks;
  std::size_t fc_weight = 0, fc_bias = 0;
};

namespace {

class Builder {
 public:
  ConvBn conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride) {
    ConvBn c;
    c.weight = add(name + ".weight", {cout, cin, k, k}, ParameterSpec::Init::kUniformFanIn, cin * k * k);
    c.gamma = add(name + ".bn.gamma", {cout}, ParameterSpec::Init::kOnes, 1);
    c.beta = add(name + ".bn.beta", {cout}, ParameterSpec::Init::kZeros, 1);
    c.stats = layout.stat_channels.size();
    layout.stat_channels.push_back(cout);
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Block basic(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride) {
    Block b;
    b.convs.push_back(conv(name + ".conv1", cin, cout, 3, stride));
    b.convs.push_back(conv(name + ".conv2", cout, cout, 3, 1));
    if (stride != 1 || cin != cout) {
      b.has_projection = true;
      b.projection = conv(name + ".proj", cin, cout, 1, stride);
    }
    return b;
  }

  Block bottleneck(const std::string& name, std::size_t cin, std::size_t width, std::size_t stride) {
    Block b;
    const std::size_t cout = 4 * width;
    b.convs.push_back(conv(name + ".conv1", cin, width, 1, 1));
    b.convs.push_back(conv(name + ".conv2", width, width, 3, stride));
    b.convs.push_back(conv(name + ".conv3", width, cout, 1, 1));
    if (stride != 1 || cin != cout) {
      b.has_projection = true;
      b.projection = conv(name + ".proj", cin, cout, 1, stride);
    }
    return b;
  }

  void fc(std::size_t in) {
    layout.fc_weight = add("fc.weight", {kNumClasses, in}, ParameterSpec::Init::kUniformFanIn, in);
    layout.fc_bias = add("fc.bias", {kNumClasses}, ParameterSpec::Init::kUniformFanIn, in);
  }

  ClassifierLayout layout;

 private:
  std::size_t add(std::string name, Shape shape, ParameterSpec::Init init, std::size_t fan_in) {
    layout.specs.push_back({std::move(name), std::move(shape), init, fan_in});
    return layout.specs.size() - 1;
  }
};

ClassifierLayout build_layout(Architecture a) {
  Builder b;
  const std::size_t widths[] = {64, 128, 256, 512};
  switch (a) {
    case Architecture::kResNet8Tiny: {
      b.layout.stem = b.conv("stem", 3, 16, 3, 2);
      const std::size_t w[] = {16, 32, 32, 64}, s[] = {1, 2, 2, 2};
      std::size_t cin = 16;
      for (std::size_t i = 0; i < 4; ++i) {
        b.layout.blocks.push_back(b.basic("block" + std::to_string(i), cin, w[i], s[i]));
        cin = w[i];
      }
      b.fc(cin);
      break;
    }
    case Architecture::kResNet18:
    case Architecture::kResNet50: {
      const bool deep = a == Architecture::kResNet50;
      b.layout.stem = b.conv("stem", 3, 64, 7, 2);
      b.layout.max_pool = true;
      const std::size_t repeats18[] = {2, 2, 2, 2}, repeats50[] = {3, 4, 6, 3};
      std::size_t cin = 64;
      for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::size_t reps = deep ? repeats50[stage] : repeats18[stage];
        for (std::size_t r = 0; r < reps; ++r) {
          const std::size_t stride = (stage > 0 && r == 0) ? 2 : 1;
          const std::string name = "layer" + std::to_string(stage + 1) + "." + std::to_string(r);
          if (deep) {
            b.layout.blocks.push_back(b.bottleneck(name, cin, widths[stage], stride));
            cin = 4 * widths[stage];
          } else {
            b.layout.blocks.push_back(b.basic(name, cin, widths[stage], stride));
            cin = widths[stage];
          }
        }
      }
      b.fc(cin);
      break;
    }
  }
  return std::move(b.layout);
}

}  // namespace
}  // namespace detail

ClassifierNet::ClassifierNet(Architecture architecture, std::uint64_t seed)
    : architecture_(architecture),
      layout_(std::make_shared<const detail::ClassifierLayout>(detail::build_layout(architecture))) {
  params_ = materialize<float>(layout_->specs, seed);
  for (std::size_t c : layout_->stat_channels)
    stats_.push_back({Tensor<float>({c}, 0.0f), Tensor<float>({c}, 1.0f)});
}

std::size_t ClassifierNet::fc_weight() const { return layout_->fc_weight; }
std::size_t ClassifierNet::fc_bias() const { return layout_->fc_bias; }

ad::Var<float> ClassifierNet::forward(ad::Tape<float>& tape, const Tensor<float>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) < 16 || x.dim(2) != x.dim(3))
    throw std::invalid_argument("classifier: expected N x 3 x S x S input (S >= 16), got " + shape_str(x.shape()));
  const auto& L = *layout_;
  auto conv_bn = [&](const detail::ConvBn& c, ad::Var<float> h) {
    h = ad::conv2d(h, params_.leaf(tape, c.weight), std::optional<ad::Var<float>>(), c.stride, c.pad);
    return ad::batch_norm(h, params_.leaf(tape, c.gamma), params_.leaf(tape, c.beta), stats_[c.stats], training);
  };
  // Inputs arrive in unit range; the network sees 2x - 1.
  Tensor<float> shifted(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) shifted[i] = 2.0f * x[i] - 1.0f;
  ad::Var<float> h = tape.input(std::move(shifted));
  h = ad::relu(conv_bn(L.stem, h));
  if (L.max_pool) h = ad::max_pool2d(h, 3, 2, 1);
  for (const auto& b : L.blocks) {
    ad::Var<float> y = h;
    for (std::size_t i = 0; i < b.convs.size(); ++i) {
      y = conv_bn(b.convs[i], y);
      if (i + 1 < b.convs.size()) y = ad::relu(y);
    }
    h = ad::relu(ad::add(y, b.has_projection ? conv_bn(b.projection, h) : h));
  }
  h = ad::global_avg_pool(h);
  return ad::linear(h, params_.leaf(tape, L.fc_weight), std::optional<ad::Var<float>>(params_.leaf(tape, L.fc_bias)));
}

std::vector<std::array<double, kNumClasses>> ClassifierNet::predict_scores(const Tensor<float>& x) const {
  // Evaluation never writes the running statistics; a copy keeps this const.
  ClassifierNet view = *this;
  ad::Tape<float> tape(false);
  const Tensor<float>& logits = view.forward(tape, x, false).value();
  std::vector<std::array<double, kNumClasses>> out(x.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    double mx = logits[i * kNumClasses];
    for (std::size_t k = 1; k < kNumClasses; ++k) mx = std::max<double>(mx, logits[i * kNumClasses + k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < kNumClasses; ++k) sum += out[i][k] = std::exp(logits[i * kNumClasses + k] - mx);
    for (auto& v : out[i]) v /= sum;
  }
  return out;
}

namespace {

std::string normalized(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

Tensor<float> gather(const Tensor<float>& images, const std::vector<std::size_t>& idx, std::size_t start,
                     std::size_t count) {
  const std::size_t per = images.size() / images.dim(0);
  Tensor<float> out({count, images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t i = 0; i < count; ++i) std::copy_n(images.data() + idx[start + i] * per, per, out.data() + i * per);
  return out;
}

void check_disjoint_paths(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::set<std::string> seen(a.begin(), a.end());
  std::size_t overlap = 0;
  std::string first;
  for (const auto& p : b) {
    if (seen.count(p)) {
      if (overlap++ == 0) first = p;
    }
  }
  if (overlap > 0) {
    throw DataLeakageError("data leakage: " + std::to_string(overlap) +
                           " path(s) appear in both training and validation sets, e.g. " + first);
  }
}

// Mean precision with undefined classes counted as zero; ranks epochs.
double selection_score(const EvalReport& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (r.precision.defined[i]) s += r.precision.value[i];
  return s / static_cast<double>(kNumClasses);
}

}  // namespace

void check_disjoint(const DatasetManifest& train, const DatasetManifest& val) {
  std::vector<std::string> a, b;
  for (const auto& p : train.resolved_paths()) a.push_back(normalized(p));
  for (const auto& p : val.resolved_paths()) b.push_back(normalized(p));
  check_disjoint_paths(a, b);
}

LabeledImages load_labeled(const DatasetManifest& manifest, std::size_t image_size) {
  if (manifest.records.empty()) throw std::invalid_argument("load_labeled: manifest '" + manifest.split_name + "' is empty");
  LabeledImages out;
  const auto paths = manifest.resolved_paths();
  out.images = load_standardized(paths, image_size).data;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    out.labels.push_back(static_cast<int>(class_index(manifest.records[i].label)));
    out.paths.push_back(normalized(paths[i]));
  }
  return out;
}

std::vector<ScoreRecord> score_images(const ClassifierNet& net, const LabeledImages& data, std::size_t batch) {
  std::vector<ScoreRecord> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t count = std::min(batch, data.size() - start);
    const auto scores = net.predict_scores(gather(data.images, idx, start, count));
    for (std::size_t i = 0; i < count; ++i)
      out.push_back({scores[i], data.labels[start + i], data.paths[start + i]});
  }
  return out;
}

ClassifierResult train_classifier(const ClassifierConfig& cfg, const LabeledImages& train, const LabeledImages& val) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("train_classifier: empty training or validation set");
  check_disjoint_paths(train.paths, val.paths);
  if (train.images.dim(2) != cfg.image_size || val.images.dim(2) != cfg.image_size)
    throw std::invalid_argument("train_classifier: image size does not match the config");

  ClassifierNet net(cfg.architecture, derive_seed(cfg.seed, "classifier/init"));
  AdamOptimizer<float> opt(net.parameters(), AdamOptions{cfg.optimizer, cfg.learning_rate, cfg.weight_decay});
  ClassifierNet best = net;
  EvalReport best_report;
  std::vector<ScoreRecord> best_scores;
  double best_score = -1.0;
  std::vector<ClassifierEpoch> history;

  const std::size_t n = train.size();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "classifier/epoch/" + std::to_string(epoch)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      if (count < 2 && n > 1) continue;  // a single-sample batch has no batch statistics
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train.labels[order[start + i]];
      ad::Tape<float> tape;
      const ad::Var<float> logits = net.forward(tape, gather(train.images, order, start, count), true);
      const ad::Var<float> loss = ad::softmax_cross_entropy(logits, labels);
      tape.backward(loss);
      const Tensor<float>& lv = logits.value();
      for (std::size_t i = 0; i < count; ++i) {
        ScoreRecord r;
        for (std::size_t k = 0; k < kNumClasses; ++k) r.scores[k] = lv[i * kNumClasses + k];
        if (predicted_class(r) == labels[i]) ++correct;
      }
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(count);
      opt.step(net.parameters(), tape.parameter_gradients(net.parameters().pointers()));
    }

    auto scores = score_images(net, val);
    EvalReport report = evaluate(scores, cfg);
    report.best_epoch = epoch;
    const double sel = selection_score(report);
    history.push_back({epoch, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n), sel});
    if (sel > best_score) {
      best_score = sel;
      best = net;
      best_report = std::move(report);
      best_scores = std::move(scores);
    }
  }
  return ClassifierResult{std::move(best), std::move(best_report), std::move(history), std::move(best_scores)};
}

ClassifierResult train_classifier(const ClassifierConfig& cfg, const DatasetManifest& train, const DatasetManifest& val) {
  check_disjoint(train, val);
  return train_classifier(cfg, load_labeled(train, cfg.image_size), load_labeled(val, cfg.image_size));
}

GridSpec GridSpec::full() {
  return GridSpec{{OptimizerKind::kAdam, OptimizerKind::kAdamW},
                  {1e-5, 5e-4, 1e-4, 5e-3, 1e-3, 5e-2, 1e-2},
                  {1e-5, 1e-4, 1e-3},
                  {32, 64, 128}};
}

GridSpec GridSpec::smoke() { return GridSpec{{OptimizerKind::kAdam}, {1e-3}, {1e-4}, {32}}; }

GridSpec GridSpec::from_name(std::string_view name) {
  if (name == "full") return full();
  if (name == "smoke") return smoke();
  throw std::invalid_argument("unknown grid '" + std::string(name) + "' (valid: full, smoke)");
}

std::size_t GridSpec::cardinality() const {
  return optimizers.size() * learning_rates.size() * weight_decays.size() * batch_sizes.size();
}

std::vector<ClassifierConfig> GridSpec::enumerate(const ClassifierConfig& base) const {
  std::vector<ClassifierConfig> out;
  out.reserve(cardinality());
  for (auto o : optimizers)
    for (double lr : learning_rates)
      for (double wd : weight_decays)
        for (std::size_t bs : batch_sizes) {
          ClassifierConfig c = base;
          c.optimizer = o;
          c.learning_rate = lr;
          c.weight_decay = wd;
          c.batch_size = bs;
          c.seed = derive_seed(base.seed, static_cast<std::uint64_t>(out.size()));
          out.push_back(c);
        }
  return out;
}

std::vector<EvalReport> grid_search(const GridSpec& grid, const ClassifierConfig& base, const LabeledImages& train,
                                    const LabeledImages& val, std::size_t jobs,
                                    const std::function<void(std::size_t, const EvalReport&)>& on_done) {
  const auto configs = grid.enumerate(base);
  check_disjoint_paths(train.paths, val.paths);
  std::vector<EvalReport> reports(configs.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex, done_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < configs.size();) {
      try {
        reports[i] = train_classifier(configs[i], train, val).report;
        if (on_done) {
          std::lock_guard lock(done_mutex);
          on_done(i, reports[i]);
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = configs.size();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, configs.size()));
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);

  std::vector<std::size_t> order(configs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return reports[a].macro_precision > reports[b].macro_precision;
  });
  std::vector<EvalReport> sorted;
  for (std::size_t i : order) sorted.push_back(std::move(reports[i]));
  return sorted;
}

void write_grid_results(const fs::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "rank,best,architecture,optimizer,learning_rate,weight_decay,batch_size,epochs,seed,best_epoch,"
      << report_csv_header() << '\n';
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const auto& c = r.config;
    out << i + 1 << ',' << (i == 0 ? 1 : 0) << ',' << to_string(c.architecture) << ',' << to_string(c.optimizer) << ','
        << c.learning_rate << ',' << c.weight_decay << ',' << c.batch_size << ',' << c.epochs << ',' << c.seed << ','
        << r.best_epoch << ',' << report_csv_row(r) << '\n';
  }
}

}  // namespace svp
