#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carm/dataset.hpp"
#include "carm/model.hpp"
#include "carm/tensor.hpp"

namespace carm {

enum class InitKind { random, pretext };
enum class TuneMode { full, probe2, probe1 };

std::string_view to_string(InitKind kind);
InitKind parse_init_kind(std::string_view text);
std::string_view to_string(TuneMode mode);
TuneMode parse_tune_mode(std::string_view text);

inline constexpr int kDefaultRegressionBatch = 512;
inline constexpr int kDefaultClassificationBatch = 64;

struct TrainConfig {
  HeadKind task = HeadKind::regression;
  InitKind init = InitKind::random;
  TuneMode tune_mode = TuneMode::full;
  double learning_rate = 1e-4;
  int batch_size = 0;  // 0: the task default (512 regression, 64 classification)
  int epochs = 1;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentationConfig augmentation;
  bool use_demographics = true;
  ModelConfig model;

  void validate() const;
  int effective_batch_size() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Structured-text form with every field spelled out; parsing is strict and
// rejects unknown keys. Missing keys keep their defaults.
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view text);

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  int epoch = 0;
  std::vector<double> train_loss_history;
};

inline constexpr int kCheckpointVersion = 1;

// Archive: magic "CARMCKPT", u32 version, u64 manifest length, manifest
// (structured text: schema version, head, D, attention_tokens, norm_stats,
// config echo, epoch, loss history and the tensor table), then each tensor in
// table order as little-endian float32.
std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.jsonl";

// Mean over the batch and the three coordinates of the squared error.
// pred, target: [N, 3]. `grad`, if given, receives d loss / d pred.
double mse_loss(const Tensor& pred, const Tensor& target, Tensor* grad = nullptr);

// Mean negative log-softmax of the true class; labels are landmark ids 1..20.
double cross_entropy_loss(const Tensor& logits, std::span<const int> labels, Tensor* grad = nullptr);

// One flag per ModelParams tensor. full: every learnable tensor; probe2: both
// head affine layers; probe1: the final affine layer only. Buffers are never
// trainable.
std::vector<bool> set_trainable(const ModelParams& params, TuneMode mode);

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

  // Updates every tensor whose gradient is non-empty.
  void step(ModelParams& params, const std::vector<Tensor>& grads);
  std::int64_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// z-score statistics of the demographics of the cases in the train split.
NormStats compute_norm_stats(const DatasetManifest& manifest);

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double wall_time_s = 0.0;
};

struct TrainHooks {
  std::function<void(const ModelParams&)> on_start;  // parameters before the first step
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(const ModelParams&)> after_step;
};

// Adam on mse_loss over shuffled, augmented mini-batches of the train split.
// Writes checkpoint.bin after every epoch and appends to metrics.jsonl in
// `out_dir` when it is non-empty.
Checkpoint pretrain_regression(const TrainConfig& config, const DatasetManifest& train_manifest,
                               const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

Checkpoint finetune_classification(const TrainConfig& config, const std::optional<Checkpoint>& init_checkpoint,
                                   const DatasetManifest& train_manifest, const std::filesystem::path& out_dir,
                                   const TrainHooks& hooks = {});

// Model inputs for a set of records: images [N, R, R] and raw demographics.
struct Batch {
  Tensor images;
  Tensor demographics;
};
Batch load_batch(const DatasetManifest& manifest, std::span<const ManifestRecord* const> records);

// Raw-pose regression targets [N, 3].
Tensor pose_targets(std::span<const ManifestRecord* const> records);

}  // namespace carm
