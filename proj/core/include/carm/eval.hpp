#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "carm/dataset.hpp"
#include "carm/training.hpp"

namespace carm {

// Rows are true landmark ids, columns predicted ids (both 1..20).
class ConfusionMatrix {
 public:
  void add(int true_id, int predicted_id, std::int64_t count = 1);
  std::int64_t at(int true_id, int predicted_id) const;
  std::int64_t total() const;
  std::int64_t trace() const;
  std::int64_t true_positives(int id) const { return at(id, id); }
  std::int64_t false_positives(int id) const;  // column sum minus diagonal
  std::int64_t false_negatives(int id) const;  // row sum minus diagonal

 private:
  std::array<std::array<std::int64_t, kLandmarkCount>, kLandmarkCount> counts_{};
};

struct PrfMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Pools TP/FP/FN over classes. Ratios are reduced over integers before the
// single conversion to floating point.
PrfMetrics micro_metrics(const ConfusionMatrix& cm);
// Unweighted mean over classes that occur as a true or predicted label.
PrfMetrics macro_metrics(const ConfusionMatrix& cm);

struct RegressionMetrics {
  double mse_raw = 0.0;        // mean over records and coordinates, normalised units
  double mean_error_mm = 0.0;  // mean Euclidean distance after denormalisation
  double rmse_mm = 0.0;        // sqrt of the mean squared Euclidean distance
};

// pred/truth: normalised poses; extents: per-record case extents in mm.
RegressionMetrics regression_metrics(std::span<const Vec3> predicted_raw, std::span<const Vec3> true_raw,
                                     std::span<const Vec3> extents);

struct EvalReport {
  std::string name;
  HeadKind task = HeadKind::regression;
  std::vector<std::pair<std::string, double>> metrics;  // stable order
  std::vector<std::int64_t> class_support;              // per id 1..20, classification only
  std::vector<std::int64_t> class_correct;
  std::string config_echo;  // training config of the evaluated checkpoint
  std::string dataset_fingerprint;
  std::int64_t record_count = 0;

  double metric(const std::string& key) const;
};

// Evaluates on the records of `split` (default test).
EvalReport evaluate_regression(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                               Split split = Split::test, std::size_t batch_size = 64);
EvalReport evaluate_classification(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                                   Split split = Split::test, std::size_t batch_size = 64);

// Predicted landmark id for each row of [N, 20] logits (first maximum wins).
std::vector<int> argmax_ids(const Tensor& logits);

// Table cell text with four decimals.
std::string format_metric(double value);

// Writes report.jsonl (one object per report after a header line) and
// report.txt (aligned tables: regression rows in input order, classification
// rows by micro F1 descending). Returns the two paths.
std::pair<std::filesystem::path, std::filesystem::path> emit_report(const std::vector<EvalReport>& reports,
                                                                    const std::filesystem::path& out_dir);

std::string render_report_table(const std::vector<EvalReport>& reports);

}  // namespace carm
