#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "svp/manifest.hpp"

namespace svp {

// Per-sample softmax scores in the fixed class order.
struct ScoreRecord {
  std::array<double, kNumClasses> scores{};
  int label = 0;
  std::string path;
};

// counts[i][j]: samples of true class i predicted as class j.
struct ConfusionMatrix3 {
  std::array<std::array<std::int64_t, kNumClasses>, kNumClasses> counts{};

  std::int64_t row_sum(std::size_t i) const;
  std::int64_t column_sum(std::size_t j) const;
  std::int64_t total() const;
  bool operator==(const ConfusionMatrix3&) const = default;
};

// Argmax; ties go to the lowest class index.
int predicted_class(const ScoreRecord& r);

ConfusionMatrix3 confusion_matrix(std::span<const ScoreRecord> records);

struct ClassPrecision {
  std::array<double, kNumClasses> value{};  // NaN where undefined
  std::array<bool, kNumClasses> defined{};

  bool all_defined() const;
};

// C_ii over the column sum; a zero column leaves the class undefined.
ClassPrecision precision_per_class(const ConfusionMatrix3& c);

// Arithmetic mean; throws std::domain_error on any undefined (NaN) entry.
double macro_precision(std::span<const double> per_class);
double macro_precision(const ClassPrecision& p);

// Mean over the defined classes only. Each excluded class appends a warning.
// Throws when no class is defined.
double macro_precision_lenient(const ClassPrecision& p, std::vector<std::string>* warnings = nullptr);

// Step-rule average precision sum_k (R_k - R_{k-1}) P_k over descending unique
// thresholds. Throws when there are no positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);

// Unweighted mean of the one-vs-rest average precisions of the three classes.
double auprc(std::span<const ScoreRecord> records);

// Writes the top_k most confident misclassifications of every (true, pred)
// cell as `<out_dir>/<true>_as_<pred>/<rank>_<file stem>.png` and an index
// `<out_dir>/misclassified.csv` (path,true,pred,score). Returns the written
// image paths. Source images are read from record paths (resolved against
// `base_dir` when relative).
std::vector<std::filesystem::path> export_misclassified(std::span<const ScoreRecord> records,
                                                        const ConfusionMatrix3& c,
                                                        const std::filesystem::path& out_dir, std::size_t top_k,
                                                        const std::filesystem::path& base_dir = {});

}  // namespace svp
