#include "svp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "svp/imageio.hpp"

namespace svp {

std::int64_t ConfusionMatrix3::row_sum(std::size_t i) const {
  return std::accumulate(counts.at(i).begin(), counts.at(i).end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix3::column_sum(std::size_t j) const {
  std::int64_t s = 0;
  for (const auto& row : counts) s += row.at(j);
  return s;
}

std::int64_t ConfusionMatrix3::total() const {
  std::int64_t s = 0;
  for (std::size_t i = 0; i < kNumClasses; ++i) s += row_sum(i);
  return s;
}

int predicted_class(const ScoreRecord& r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < kNumClasses; ++k)
    if (r.scores[k] > r.scores[best]) best = k;
  return static_cast<int>(best);
}

namespace {
std::size_t checked_label(int label) {
  if (label < 0 || label >= static_cast<int>(kNumClasses))
    throw std::invalid_argument("score record label " + std::to_string(label) + " outside 0..2");
  return static_cast<std::size_t>(label);
}
}  // namespace

ConfusionMatrix3 confusion_matrix(std::span<const ScoreRecord> records) {
  if (records.empty()) throw std::invalid_argument("confusion_matrix: no records");
  ConfusionMatrix3 c;
  for (const auto& r : records) c.counts[checked_label(r.label)][static_cast<std::size_t>(predicted_class(r))]++;
  return c;
}

bool ClassPrecision::all_defined() const {
  return std::all_of(defined.begin(), defined.end(), [](bool b) { return b; });
}

ClassPrecision precision_per_class(const ConfusionMatrix3& c) {
  ClassPrecision p;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    const std::int64_t col = c.column_sum(i);
    p.defined[i] = col > 0;
    p.value[i] = col > 0 ? static_cast<double>(c.counts[i][i]) / static_cast<double>(col)
                         : std::numeric_limits<double>::quiet_NaN();
  }
  return p;
}

double macro_precision(std::span<const double> per_class) {
  if (per_class.empty()) throw std::invalid_argument("macro_precision: no classes");
  double s = 0.0;
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    if (std::isnan(per_class[i]))
      throw std::domain_error("macro_precision: precision of class " + std::to_string(i) + " is undefined");
    s += per_class[i];
  }
  return s / static_cast<double>(per_class.size());
}

double macro_precision(const ClassPrecision& p) {
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (!p.defined[i]) {
      throw std::domain_error("macro_precision: precision of " +
                              std::string(to_string(kAllClasses[i])) + " is undefined (no predictions)");
    }
  }
  return macro_precision(std::span<const double>(p.value));
}

double macro_precision_lenient(const ClassPrecision& p, std::vector<std::string>* warnings) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (p.defined[i]) {
      s += p.value[i];
      ++n;
    } else if (warnings) {
      warnings->push_back("precision of " + std::string(to_string(kAllClasses[i])) +
                          " undefined (no predictions); excluded from macro average");
    }
  }
  if (n == 0) throw std::domain_error("macro_precision: no class has a defined precision");
  return s / n;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("average_precision: size mismatch");
  const auto total_pos = std::count_if(positive.begin(), positive.end(), [](std::uint8_t p) { return p != 0; });
  if (total_pos == 0) throw std::domain_error("average_precision: no positive samples");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, seen = 0;
  for (std::size_t k = 0; k < order.size();) {
    // Every sample sharing this score enters at the same threshold.
    const double thr = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == thr; ++k) {
      ++seen;
      if (positive[order[k]]) ++tp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

double auprc(std::span<const ScoreRecord> records) {
  if (records.empty()) throw std::invalid_argument("auprc: no records");
  double sum = 0.0;
  std::vector<double> s(records.size());
  std::vector<std::uint8_t> pos(records.size());
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      s[i] = records[i].scores[c];
      pos[i] = checked_label(records[i].label) == c;
    }
    if (std::find(pos.begin(), pos.end(), 1) == pos.end())
      throw std::domain_error("auprc: class " + std::string(to_string(kAllClasses[c])) + " has no positive samples");
    sum += average_precision(s, pos);
  }
  return sum / static_cast<double>(kNumClasses);
}

std::vector<std::filesystem::path> export_misclassified(std::span<const ScoreRecord> records,
                                                        const ConfusionMatrix3& c,
                                                        const std::filesystem::path& out_dir, std::size_t top_k,
                                                        const std::filesystem::path& base_dir) {
  if (confusion_matrix(records) != c) throw std::invalid_argument("export_misclassified: matrix does not match records");
  std::filesystem::create_directories(out_dir);
  std::ofstream index(out_dir / "misclassified.csv", std::ios::trunc);
  if (!index) throw std::runtime_error("cannot write " + (out_dir / "misclassified.csv").string());
  index << "path,true,pred,score\n" << std::setprecision(9);

  std::vector<std::filesystem::path> written;
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    for (std::size_t p = 0; p < kNumClasses; ++p) {
      if (t == p || c.counts[t][p] == 0) continue;
      std::vector<const ScoreRecord*> cell;
      for (const auto& r : records)
        if (static_cast<std::size_t>(r.label) == t && static_cast<std::size_t>(predicted_class(r)) == p) cell.push_back(&r);
      std::stable_sort(cell.begin(), cell.end(),
                       [p](const ScoreRecord* a, const ScoreRecord* b) { return a->scores[p] > b->scores[p]; });
      if (cell.size() > top_k) cell.resize(top_k);
      const std::string tname(to_string(kAllClasses[t])), pname(to_string(kAllClasses[p]));
      const auto dir = out_dir / (tname + "_as_" + pname);
      std::filesystem::create_directories(dir);
      for (std::size_t rank = 0; rank < cell.size(); ++rank) {
        std::filesystem::path src = cell[rank]->path;
        if (src.is_relative() && !base_dir.empty()) src = base_dir / src;
        std::ostringstream name;
        name << std::setw(3) << std::setfill('0') << rank << '_' << src.stem().string() << ".png";
        const auto dst = dir / name.str();
        save_png(dst, load_image(src));
        std::string csv_path = cell[rank]->path;
        if (csv_path.find_first_of(",\"\n") != std::string::npos) {
          std::string q = "\"";
          for (char ch : csv_path) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
          csv_path = q + "\"";
        }
        index << csv_path << ',' << tname << ',' << pname << ',' << cell[rank]->scores[p] << '\n';
        written.push_back(dst);
      }
    }
  }
  return written;
}

}  // namespace svp
