#include "carm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace carm {
namespace {

using json = nlohmann::ordered_json;

void check_id(int id) {
  if (id < 1 || id > kLandmarkCount) throw ValidationError("landmark id " + std::to_string(id) + " outside 1..20");
}

double ratio(std::int64_t num, std::int64_t den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

std::vector<const ManifestRecord*> records_for(const DatasetManifest& manifest, Split split) {
  auto records = manifest.select(split);
  if (records.empty()) throw ValidationError("manifest has no " + std::string(to_string(split)) + " records to evaluate");
  return records;
}

template <class Fn>
void for_batches(const std::vector<const ManifestRecord*>& records, std::size_t batch_size, Fn&& fn) {
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    fn(std::span<const ManifestRecord* const>(records.data() + start, end - start));
  }
}

std::string pad(const std::string& s, std::size_t width) { return s.size() >= width ? s : s + std::string(width - s.size(), ' '); }

std::string render_rows(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out += c + 1 == cells.size() ? cells[c] : pad(cells[c], width[c] + 2);
    }
    return out + "\n";
  };
  std::string out = line(header);
  for (const auto& r : rows) out += line(r);
  return out;
}

struct ConfigColumns {
  std::string init = "-", mode = "-", demographics = "-";
};

ConfigColumns config_columns(const std::string& echo) {
  ConfigColumns c;
  if (echo.empty()) return c;
  try {
    const TrainConfig cfg = train_config_from_json(echo);
    c.init = std::string(to_string(cfg.init));
    c.mode = std::string(to_string(cfg.tune_mode));
    c.demographics = cfg.use_demographics ? "with" : "without";
  } catch (const std::exception&) {
  }
  return c;
}

}  // namespace

void ConfusionMatrix::add(int true_id, int predicted_id, std::int64_t count) {
  check_id(true_id);
  check_id(predicted_id);
  if (count < 0) throw ValidationError("confusion counts must be non-negative");
  counts_[static_cast<std::size_t>(true_id - 1)][static_cast<std::size_t>(predicted_id - 1)] += count;
}

std::int64_t ConfusionMatrix::at(int true_id, int predicted_id) const {
  check_id(true_id);
  check_id(predicted_id);
  return counts_[static_cast<std::size_t>(true_id - 1)][static_cast<std::size_t>(predicted_id - 1)];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t n = 0;
  for (const auto& row : counts_)
    for (auto v : row) n += v;
  return n;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < counts_.size(); ++i) n += counts_[i][i];
  return n;
}

std::int64_t ConfusionMatrix::false_positives(int id) const {
  std::int64_t n = 0;
  for (int t = 1; t <= kLandmarkCount; ++t)
    if (t != id) n += at(t, id);
  return n;
}

std::int64_t ConfusionMatrix::false_negatives(int id) const {
  std::int64_t n = 0;
  for (int p = 1; p <= kLandmarkCount; ++p)
    if (p != id) n += at(id, p);
  return n;
}

PrfMetrics micro_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("micro metrics need a non-empty confusion matrix");
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (int id = 1; id <= kLandmarkCount; ++id) {
    tp += cm.true_positives(id);
    fp += cm.false_positives(id);
    fn += cm.false_negatives(id);
  }
  return {ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(2 * tp, 2 * tp + fp + fn)};
}

PrfMetrics macro_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("macro metrics need a non-empty confusion matrix");
  PrfMetrics m;
  int classes = 0;
  for (int id = 1; id <= kLandmarkCount; ++id) {
    const std::int64_t tp = cm.true_positives(id), fp = cm.false_positives(id), fn = cm.false_negatives(id);
    if (tp + fp + fn == 0) continue;
    ++classes;
    m.precision += ratio(tp, tp + fp);
    m.recall += ratio(tp, tp + fn);
    m.f1 += ratio(2 * tp, 2 * tp + fp + fn);
  }
  m.precision /= classes;
  m.recall /= classes;
  m.f1 /= classes;
  return m;
}

RegressionMetrics regression_metrics(std::span<const Vec3> predicted_raw, std::span<const Vec3> true_raw,
                                     std::span<const Vec3> extents) {
  if (predicted_raw.size() != true_raw.size() || true_raw.size() != extents.size())
    throw ValidationError("regression metrics need equally many predictions, targets and extents");
  if (true_raw.empty()) throw ValidationError("regression metrics need at least one record");
  double sq_raw = 0.0, dist = 0.0, sq_mm = 0.0;
  for (std::size_t i = 0; i < true_raw.size(); ++i) {
    const Vec3 d = predicted_raw[i] - true_raw[i];
    sq_raw += dot(d, d);
    const Vec3 mm{d.x * extents[i].x, d.y * extents[i].y, d.z * extents[i].z};
    dist += norm(mm);
    sq_mm += dot(mm, mm);
  }
  const double n = static_cast<double>(true_raw.size());
  return {sq_raw / (3.0 * n), dist / n, std::sqrt(sq_mm / n)};
}

double EvalReport::metric(const std::string& key) const {
  for (const auto& [k, v] : metrics)
    if (k == key) return v;
  throw ValidationError("report '" + name + "' has no metric '" + key + "'");
}

std::vector<int> argmax_ids(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != kClassificationOutputs) throw ValidationError("argmax needs [N, 20] logits");
  std::vector<int> ids;
  for (std::int64_t r = 0; r < logits.dim(0); ++r) {
    const Real* row = logits.data() + r * kClassificationOutputs;
    ids.push_back(static_cast<int>(std::max_element(row, row + kClassificationOutputs) - row) + 1);
  }
  return ids;
}

EvalReport evaluate_regression(const Checkpoint& ckpt, const DatasetManifest& manifest, Split split,
                               std::size_t batch_size) {
  if (ckpt.params.head != HeadKind::regression) throw ContractError("evaluate_regression needs a regression checkpoint");
  const auto records = records_for(manifest, split);
  std::vector<Vec3> pred, truth, extents;
  for_batches(records, batch_size, [&](std::span<const ManifestRecord* const> batch) {
    const Batch b = load_batch(manifest, batch);
    const Tensor out = predict(ckpt.params, b.images, b.demographics, ckpt.config.use_demographics);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto k = static_cast<std::int64_t>(i) * 3;
      pred.push_back({out[k], out[k + 1], out[k + 2]});
      truth.push_back(batch[i]->pose_raw);
      extents.push_back(manifest.case_info(batch[i]->case_id).extent);
    }
  });
  const RegressionMetrics m = regression_metrics(pred, truth, extents);
  EvalReport r;
  r.task = HeadKind::regression;
  r.metrics = {{"mse_raw", m.mse_raw}, {"mean_error_mm", m.mean_error_mm}, {"rmse_mm", m.rmse_mm}};
  r.config_echo = train_config_to_json(ckpt.config);
  r.dataset_fingerprint = to_hex(manifest.content_hash());
  r.record_count = static_cast<std::int64_t>(records.size());
  return r;
}

EvalReport evaluate_classification(const Checkpoint& ckpt, const DatasetManifest& manifest, Split split,
                                   std::size_t batch_size) {
  if (ckpt.params.head != HeadKind::classification)
    throw ContractError("evaluate_classification needs a classification checkpoint");
  const auto records = records_for(manifest, split);
  ConfusionMatrix cm;
  for_batches(records, batch_size, [&](std::span<const ManifestRecord* const> batch) {
    const Batch b = load_batch(manifest, batch);
    const auto ids = argmax_ids(predict(ckpt.params, b.images, b.demographics, ckpt.config.use_demographics));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!batch[i]->label) throw ValidationError("record " + batch[i]->image_path + " has no label");
      cm.add(*batch[i]->label, ids[i]);
    }
  });
  const PrfMetrics micro = micro_metrics(cm);
  const PrfMetrics macro = macro_metrics(cm);
  EvalReport r;
  r.task = HeadKind::classification;
  r.metrics = {{"micro_precision", micro.precision}, {"micro_recall", micro.recall}, {"micro_f1", micro.f1},
               {"macro_precision", macro.precision}, {"macro_recall", macro.recall}, {"macro_f1", macro.f1},
               {"accuracy", ratio(cm.trace(), cm.total())}};
  for (int id = 1; id <= kLandmarkCount; ++id) {
    r.class_support.push_back(cm.true_positives(id) + cm.false_negatives(id));
    r.class_correct.push_back(cm.true_positives(id));
  }
  r.config_echo = train_config_to_json(ckpt.config);
  r.dataset_fingerprint = to_hex(manifest.content_hash());
  r.record_count = cm.total();
  return r;
}

std::string format_metric(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", value);
  return buf;
}

std::string render_report_table(const std::vector<EvalReport>& reports) {
  std::vector<std::vector<std::string>> reg_rows, cls_rows;
  std::vector<const EvalReport*> cls;
  for (const auto& r : reports) {
    if (r.task == HeadKind::regression) {
      reg_rows.push_back({r.name, format_metric(r.metric("mse_raw")), format_metric(r.metric("mean_error_mm")),
                          format_metric(r.metric("rmse_mm")), std::to_string(r.record_count)});
    } else {
      cls.push_back(&r);
    }
  }
  std::stable_sort(cls.begin(), cls.end(),
                   [](const EvalReport* a, const EvalReport* b) { return a->metric("micro_f1") > b->metric("micro_f1"); });
  for (const EvalReport* r : cls) {
    const ConfigColumns c = config_columns(r->config_echo);
    cls_rows.push_back({r->name, c.init, c.mode, c.demographics, format_metric(r->metric("micro_precision")),
                        format_metric(r->metric("micro_recall")), format_metric(r->metric("micro_f1")),
                        format_metric(r->metric("macro_precision")), format_metric(r->metric("macro_recall")),
                        format_metric(r->metric("macro_f1")), std::to_string(r->record_count)});
  }
  std::string out = "Regression\n";
  out += render_rows({"name", "MSE (raw)", "mean error (mm)", "RMSE (mm)", "records"}, reg_rows);
  out += "\nClassification\n";
  out += render_rows({"name", "init", "mode", "demographics", "precision", "recall", "F1", "macro P", "macro R",
                      "macro F1", "records"},
                     cls_rows);
  return out;
}

std::pair<std::filesystem::path, std::filesystem::path> emit_report(const std::vector<EvalReport>& reports,
                                                                    const std::filesystem::path& out_dir) {
  detail::ensure_directory(out_dir);
  std::string jsonl = json({{"schema_version", 1}, {"kind", "carm_eval_report"}, {"report_count", reports.size()}}).dump() + "\n";
  for (const auto& r : reports) {
    json metrics = json::object();
    for (const auto& [k, v] : r.metrics) metrics[k] = v;
    json j = {{"name", r.name},
              {"task", to_string(r.task)},
              {"metrics", std::move(metrics)},
              {"records", r.record_count},
              {"class_support", r.class_support},
              {"class_correct", r.class_correct},
              {"dataset_fingerprint", r.dataset_fingerprint},
              {"config", r.config_echo.empty() ? json(nullptr) : json::parse(r.config_echo)}};
    jsonl += j.dump() + "\n";
  }
  const auto jsonl_path = out_dir / "report.jsonl";
  const auto text_path = out_dir / "report.txt";
  detail::write_file_atomic(jsonl_path, jsonl);
  detail::write_file_atomic(text_path, render_report_table(reports));
  return {jsonl_path, text_path};
}

}  // namespace carm
