#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "support.hpp"
#include "svp/classifier.hpp"
#include "svp/metrics.hpp"
#include "svp/procedural.hpp"

using namespace svp;
using svp::testing::TempDir;

namespace {

ScoreRecord rec(int label, double a, double b, double c, std::string path = {}) {
  ScoreRecord r;
  r.label = label;
  r.scores = {a, b, c};
  r.path = std::move(path);
  return r;
}

std::vector<ScoreRecord> random_records(std::size_t n, Rng& rng, int quantize) {
  std::vector<ScoreRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 3> s{};
    double z = 0;
    for (auto& v : s) {
      v = rng.uniform(0.01, 1.0);
      if (quantize > 0) v = std::round(v * quantize) / quantize + 0.01;
      z += v;
    }
    for (auto& v : s) v /= z;
    ScoreRecord r;
    r.scores = s;
    r.label = static_cast<int>(i < 3 ? i : static_cast<std::size_t>(rng.uniform_int(0, 2)));
    out.push_back(r);
  }
  return out;
}

// AP as the mean over positives of the precision at that positive's score
// (ties included in the cut).
double ap_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& pos) {
  double sum = 0;
  std::size_t npos = 0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    if (!pos[p]) continue;
    ++npos;
    std::size_t above = 0, tp = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[p]) {
        ++above;
        tp += pos[j];
      }
    sum += static_cast<double>(tp) / static_cast<double>(above);
  }
  return sum / static_cast<double>(npos);
}

LabeledImages procedural_set(const std::filesystem::path& dir, std::size_t per_class, std::uint64_t seed,
                             std::size_t size) {
  const auto m = generate_procedural_corpus(default_class_styles(), per_class, seed, dir);
  return load_labeled(m, size);
}

}  // namespace

TEST_CASE("confusion matrix: hand-built list and conservation") {
  // Labels 0 0 0 0 1 1 1 2 2 2 with predictions 0 0 1 2 1 1 0 2 2 2.
  const std::vector<ScoreRecord> r{rec(0, .8, .1, .1), rec(0, .5, .3, .2), rec(0, .2, .7, .1), rec(0, .1, .1, .8),
                                   rec(1, .1, .8, .1), rec(1, .3, .4, .3), rec(1, .6, .2, .2), rec(2, .1, .2, .7),
                                   rec(2, .2, .2, .6), rec(2, .0, .1, .9)};
  const auto c = confusion_matrix(r);
  const std::array<std::array<std::int64_t, 3>, 3> expected{{{2, 1, 1}, {1, 2, 0}, {0, 0, 3}}};
  CHECK(c.counts == expected);
  CHECK(c.row_sum(0) == 4);
  CHECK(c.row_sum(1) == 3);
  CHECK(c.row_sum(2) == 3);
  CHECK(c.column_sum(0) == 3);
  CHECK(c.total() == 10);
  CHECK_THROWS(confusion_matrix(std::vector<ScoreRecord>{}));

  // Ties go to the lowest index.
  CHECK(predicted_class(rec(2, 0.4, 0.4, 0.2)) == 0);
  CHECK(predicted_class(rec(2, 0.2, 0.4, 0.4)) == 1);

  const auto all_right = [] {
    std::vector<ScoreRecord> v;
    for (int k = 0; k < 3; ++k) v.push_back(rec(k, k == 0, k == 1, k == 2));
    return v;
  }();
  const auto d = confusion_matrix(all_right);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(d.counts[i][j] == (i == j ? 1 : 0));
}

TEST_CASE("precision per class and macro precision") {
  ConfusionMatrix3 c;
  c.counts = {{{8, 1, 1}, {0, 9, 1}, {2, 0, 8}}};
  const auto p = precision_per_class(c);
  CHECK(p.all_defined());
  CHECK(p.value[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(p.value[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(p.value[2] == doctest::Approx(0.8).epsilon(1e-15));

  ConfusionMatrix3 perfect;
  perfect.counts = {{{5, 0, 0}, {0, 7, 0}, {0, 0, 2}}};
  const auto pp = precision_per_class(perfect);
  for (double v : pp.value) CHECK(v == 1.0);
  CHECK(macro_precision(pp) == 1.0);

  const std::array<double, 3> r18_real0{94.00, 98.80, 98.06}, r18_mixed1{97.40, 98.20, 96.83};
  CHECK(std::abs(macro_precision(r18_real0) - 96.95) <= 0.005);
  CHECK(std::abs(macro_precision(r18_mixed1) - 97.48) <= 0.005);

  // No prediction ever lands in column 2.
  ConfusionMatrix3 hole;
  hole.counts = {{{3, 1, 0}, {1, 4, 0}, {2, 1, 0}}};
  const auto ph = precision_per_class(hole);
  CHECK(ph.defined[0]);
  CHECK(ph.defined[1]);
  CHECK_FALSE(ph.defined[2]);
  CHECK(std::isnan(ph.value[2]));
  CHECK_THROWS_AS(macro_precision(ph), std::domain_error);
  std::vector<std::string> warnings;
  CHECK(macro_precision_lenient(ph, &warnings) == doctest::Approx((3.0 / 6 + 4.0 / 6) / 2));
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("protein") != std::string::npos);
}

TEST_CASE("precision identity against a per-record oracle on random sets") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto records = random_records(static_cast<std::size_t>(rng.uniform_int(3, 60)), rng, trial % 2 ? 5 : 0);
    const auto p = precision_per_class(confusion_matrix(records));
    for (int k = 0; k < 3; ++k) {
      std::int64_t predicted = 0, correct = 0;
      for (const auto& r : records) {
        int best = 0;
        for (int j = 1; j < 3; ++j)
          if (r.scores[j] > r.scores[best]) best = j;
        if (best != k) continue;
        ++predicted;
        correct += r.label == k;
      }
      if (predicted == 0) {
        CHECK_FALSE(p.defined[k]);
      } else {
        REQUIRE(p.defined[k]);
        CHECK(p.value[k] == static_cast<double>(correct) / static_cast<double>(predicted));
      }
    }
  }
}

TEST_CASE("average precision examples and oracle") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> y{1, 1, 0, 1};
  CHECK(average_precision(s, y) == doctest::Approx(0.9166666666666666).epsilon(1e-12));
  CHECK(std::abs(average_precision(s, y) - 0.9167) < 5e-5);
  const std::vector<std::uint8_t> sep{1, 1, 0, 0};
  CHECK(average_precision(s, sep) == 1.0);
  CHECK_THROWS(average_precision(s, std::vector<std::uint8_t>{0, 0, 0, 0}));

  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 40));
    std::vector<double> sc(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = trial % 3 == 0 ? std::round(rng.uniform() * 4) / 4 : rng.uniform();
      pos[i] = rng.uniform() < 0.4;
    }
    pos[0] = 1;
    const double ap = average_precision(sc, pos);
    CHECK(std::abs(ap - ap_oracle(sc, pos)) < 1e-9);

    // Strictly increasing transform leaves the ordering and ties unchanged.
    std::vector<double> tr(n);
    for (std::size_t i = 0; i < n; ++i) tr[i] = std::exp(3 * sc[i]) + sc[i] * sc[i] * sc[i] - 7;
    CHECK(std::abs(average_precision(tr, pos) - ap) < 1e-12);
  }
}

TEST_CASE("AUPRC: macro over one-vs-rest classes") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto records = random_records(30, rng, 0);
    double mean = 0;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> s;
      std::vector<std::uint8_t> pos;
      for (const auto& r : records) {
        s.push_back(r.scores[k]);
        pos.push_back(r.label == k);
      }
      mean += ap_oracle(s, pos) / 3;
    }
    CHECK(std::abs(auprc(records) - mean) < 1e-9);
  }
  std::vector<ScoreRecord> perfect;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 4; ++i) perfect.push_back(rec(k, k == 0 ? 0.8 : 0.1, k == 1 ? 0.8 : 0.1, k == 2 ? 0.8 : 0.1));
  CHECK(auprc(perfect) == 1.0);
  const std::vector<ScoreRecord> missing{rec(0, .5, .3, .2), rec(1, .3, .5, .2)};
  CHECK_THROWS(auprc(missing));
}

TEST_CASE("misclassification export") {
  TempDir dir("export");
  std::vector<ScoreRecord> records;
  for (int i = 0; i < 30; ++i) {
    const std::string name = "img" + std::to_string(i) + ".png";
    RawImage img(8, 8, 3, static_cast<std::uint8_t>(i * 8));
    save_png(dir / name, img);
    const int label = i % 3;
    records.push_back(rec(label, label == 0 ? 0.9 : 0.05, label == 1 ? 0.9 : 0.05, label == 2 ? 0.9 : 0.05, name));
  }
  auto out = export_misclassified(records, confusion_matrix(records), dir / "none", 3, dir.path());
  CHECK(out.empty());
  CHECK(testing::read_file(dir / "none" / "misclassified.csv") == "path,true,pred,score\n");

  // Plant one confident error: image 5 (protein) scored as air bubble.
  records[5].scores = {0.05, 0.9, 0.05};
  out = export_misclassified(records, confusion_matrix(records), dir / "one", 1, dir.path());
  REQUIRE(out.size() == 1);
  CHECK(std::filesystem::exists(out[0]));
  CHECK(out[0].filename().string().find("img5") != std::string::npos);
  const auto index = testing::read_file(dir / "one" / "misclassified.csv");
  CHECK(index.find("img5.png,protein,air_bubble,0.9") != std::string::npos);

  // Random scores: at most top_k per off-diagonal cell.
  Rng rng(5);
  for (auto& r : records) {
    double z = 0;
    for (auto& v : r.scores) z += (v = rng.uniform(0.01, 1));
    for (auto& v : r.scores) v /= z;
  }
  out = export_misclassified(records, confusion_matrix(records), dir / "many", 2, dir.path());
  CHECK(out.size() <= 12);
  const auto text = testing::read_file(dir / "many" / "misclassified.csv");
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == out.size() + 1);
  CHECK_THROWS(export_misclassified(records, ConfusionMatrix3{}, dir / "bad", 2, dir.path()));
}

TEST_CASE("classifier scores: softmax, uniform head and determinism") {
  Rng rng(6);
  Tensor<float> x({3, 3, 32, 32});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  ClassifierNet net(Architecture::kResNet8Tiny, 1);
  const auto s = net.predict_scores(x);
  REQUIRE(s.size() == 3);
  for (const auto& row : s) {
    CHECK(std::abs(row[0] + row[1] + row[2] - 1.0) < 1e-6);
    for (double v : row) CHECK(v >= 0.0);
  }
  const ClassifierNet twin(Architecture::kResNet8Tiny, 1);
  const auto s2 = twin.predict_scores(x);
  CHECK(s == s2);

  for (auto& v : net.parameters()[net.fc_weight()].value.values()) v = 0.0f;
  for (auto& v : net.parameters()[net.fc_bias()].value.values()) v = 0.0f;
  for (const auto& row : net.predict_scores(x))
    for (double v : row) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("full-size architectures: output shape and parameter counts") {
  Rng rng(7);
  Tensor<float> x({1, 3, 64, 64});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  // Reference counts from the layer tables: conv weights + BatchNorm affine +
  // FC. resnet18: 11,176,512 feature parameters + 512*3 + 3; resnet50:
  // 23,508,032 + 2048*3 + 3.
  const std::pair<Architecture, std::size_t> cases[] = {{Architecture::kResNet18, 11'178'051},
                                                        {Architecture::kResNet50, 23'514'179}};
  for (const auto& [arch, expected] : cases) {
    const ClassifierNet net(arch, 2);
    CHECK(net.parameters().scalar_count() == expected);
    const auto s = net.predict_scores(x);
    REQUIRE(s.size() == 1);
    CHECK(std::abs(s[0][0] + s[0][1] + s[0][2] - 1.0) < 1e-6);
  }
  CHECK(parse_architecture("resnet8_tiny") == Architecture::kResNet8Tiny);
  CHECK_THROWS(parse_architecture("vgg16"));
}

TEST_CASE("resnet18 parameter count from its layer table") {
  // conv k x k cin -> cout: k*k*cin*cout; each BN: 2*c.
  auto conv = [](std::size_t k, std::size_t cin, std::size_t cout) { return k * k * cin * cout + 2 * cout; };
  std::size_t n = conv(7, 3, 64);
  const std::size_t widths[] = {64, 128, 256, 512};
  std::size_t cin = 64;
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t w = widths[stage];
    for (int b = 0; b < 2; ++b) {
      n += conv(3, cin, w) + conv(3, w, w);
      if (cin != w) n += conv(1, cin, w);
      cin = w;
    }
  }
  n += 512 * 3 + 3;
  CHECK(ClassifierNet(Architecture::kResNet18, 0).parameters().scalar_count() == n);
}

TEST_CASE("training beats chance and is deterministic") {
  TempDir dir("cls");
  const auto train = procedural_set(dir / "train", 10, 11, 32);
  const auto val = procedural_set(dir / "val", 4, 12, 32);
  REQUIRE(train.size() == 30);
  ClassifierConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.learning_rate = 2e-3;
  cfg.image_size = 32;
  cfg.seed = 3;
  const auto a = train_classifier(cfg, train, val);
  REQUIRE(a.history.size() == 5);
  CHECK(a.history.back().train_accuracy > 1.0 / 3.0);
  const auto b = train_classifier(cfg, train, val);
  CHECK(a.report.confusion == b.report.confusion);
  CHECK(a.report.macro_precision == b.report.macro_precision);
  CHECK(a.report.auprc == b.report.auprc);
  CHECK(a.report.best_epoch == b.report.best_epoch);
  CHECK(a.val_scores.size() == val.size());
  for (std::size_t i = 0; i < a.val_scores.size(); ++i) CHECK(a.val_scores[i].scores == b.val_scores[i].scores);
  CHECK(report_csv_header() == "silicone_oil,air_bubble,protein,macro,auprc");
}

TEST_CASE("data leakage guard") {
  TempDir dir("leak");
  const auto m = generate_procedural_corpus(default_class_styles(), 2, 1, dir.path());
  DatasetManifest val;
  val.records = {m.records.front()};
  val.base_dir = m.base_dir;
  CHECK_THROWS_AS(check_disjoint(m, val), DataLeakageError);
  ClassifierConfig cfg;
  cfg.epochs = 1;
  cfg.image_size = 16;
  CHECK_THROWS_AS(train_classifier(cfg, m, val), DataLeakageError);
  DatasetManifest other = m;
  other.records.erase(other.records.begin());
  CHECK_NOTHROW(check_disjoint(other, val));
}

TEST_CASE("grid enumeration") {
  const auto grid = GridSpec::full();
  CHECK(grid.cardinality() == 126);
  CHECK(grid.learning_rates.size() == 7);
  ClassifierConfig base;
  base.seed = 9;
  const auto configs = grid.enumerate(base);
  REQUIRE(configs.size() == 126);
  std::set<std::tuple<int, double, double, std::size_t>> unique;
  for (const auto& c : configs)
    unique.insert({static_cast<int>(c.optimizer), c.learning_rate, c.weight_decay, c.batch_size});
  CHECK(unique.size() == 126);
  CHECK(configs.front().seed == derive_seed(9, 0));
  CHECK(configs.back().seed == derive_seed(9, 125));
  CHECK(configs.front().optimizer == OptimizerKind::kAdam);
  CHECK(configs.back().optimizer == OptimizerKind::kAdamW);
  CHECK(GridSpec::smoke().cardinality() == 1);
  CHECK_THROWS(GridSpec::from_name("huge"));

  // Cardinality is the product for arbitrary grids.
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    GridSpec g;
    g.optimizers.resize(static_cast<std::size_t>(rng.uniform_int(1, 2)), OptimizerKind::kAdam);
    if (g.optimizers.size() == 2) g.optimizers[1] = OptimizerKind::kAdamW;
    for (int i = 0, n = static_cast<int>(rng.uniform_int(1, 4)); i < n; ++i) g.learning_rates.push_back(1e-3 * (i + 1));
    for (int i = 0, n = static_cast<int>(rng.uniform_int(1, 3)); i < n; ++i) g.weight_decays.push_back(1e-4 * (i + 1));
    for (int i = 0, n = static_cast<int>(rng.uniform_int(1, 3)); i < n; ++i) g.batch_sizes.push_back(32u << i);
    const auto expected = g.optimizers.size() * g.learning_rates.size() * g.weight_decays.size() * g.batch_sizes.size();
    CHECK(g.cardinality() == expected);
    CHECK(g.enumerate(base).size() == expected);
  }
}

TEST_CASE("grid search: sorted reports, deterministic order") {
  TempDir dir("grid");
  const auto train = procedural_set(dir / "train", 4, 21, 16);
  const auto val = procedural_set(dir / "val", 3, 22, 16);
  GridSpec g{{OptimizerKind::kAdam, OptimizerKind::kAdamW}, {1e-3, 1e-2}, {1e-4}, {32}};
  ClassifierConfig base;
  base.epochs = 1;
  base.image_size = 16;
  base.seed = 4;
  const auto a = grid_search(g, base, train, val, 1);
  const auto b = grid_search(g, base, train, val, 2);
  REQUIRE(a.size() == 4);
  REQUIRE(b.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].config == b[i].config);
    CHECK(a[i].macro_precision == b[i].macro_precision);
    if (i > 0) CHECK(a[i - 1].macro_precision >= a[i].macro_precision);
  }
  write_grid_results(dir / "grid.csv", a);
  const auto text = testing::read_file(dir / "grid.csv");
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == 5);
}
