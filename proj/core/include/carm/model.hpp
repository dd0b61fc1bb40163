#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carm/nn.hpp"
#include "carm/tensor.hpp"

namespace carm {

struct Demographics;
struct DrrImage;

enum class HeadKind { regression, classification };
enum class AttentionTokens { spatial, pooled };
enum class ParamGroup { encoder, projector, demographic, attention, head };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);
std::string_view to_string(AttentionTokens mode);
AttentionTokens parse_attention_tokens(std::string_view text);
std::string_view to_string(ParamGroup group);

inline constexpr int kRegressionOutputs = 3;
inline constexpr int kClassificationOutputs = 20;
inline constexpr int kDemographicFields = 4;

struct ModelConfig {
  int input_resolution = 256;
  // Channels of the first residual stage; 64 is the standard ResNet-34 width.
  int base_width = 64;
  std::array<int, 4> blocks = {3, 4, 6, 3};
  int embed_dim = 128;
  int ffn_dim = 512;
  int head_hidden = 128;
  AttentionTokens attention_tokens = AttentionTokens::spatial;

  void validate() const;
  int feature_channels() const { return base_width * 8; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// z-score statistics of the four demographic fields (age, sex, height,
// weight); identity until training computes them.
struct NormStats {
  std::array<double, kDemographicFields> mean = {0, 0, 0, 0};
  std::array<double, kDemographicFields> stddev = {1, 1, 1, 1};

  void validate() const;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

struct ParamTensor {
  std::string name;
  ParamGroup group = ParamGroup::encoder;
  bool buffer = false;  // running statistics: saved, never optimised
  Tensor value;
};

class ModelParams {
 public:
  ModelConfig config;
  HeadKind head = HeadKind::regression;
  NormStats norm_stats;
  std::vector<ParamTensor> tensors;

  std::size_t index_of(std::string_view name) const;
  const Tensor& at(std::string_view name) const { return tensors[index_of(name)].value; }
  Tensor& at(std::string_view name) { return tensors[index_of(name)].value; }
  int output_width() const { return head == HeadKind::regression ? kRegressionOutputs : kClassificationOutputs; }

  std::uint64_t hash() const;
  std::uint64_t trunk_hash() const;  // every tensor outside the head, buffers included
  std::uint64_t head_hash() const;
  std::int64_t parameter_count() const;
};

// Tensor names, shapes and groups for a configuration, in checkpoint order.
struct TensorSpec {
  std::string name;
  ParamGroup group;
  bool buffer;
  Shape shape;
};
std::vector<TensorSpec> parameter_layout(const ModelConfig& config, HeadKind head);

// Fan-in scaled random initialisation; deterministic in seed.
ModelParams init_params(const ModelConfig& config, HeadKind head, std::uint64_t seed);

// Copies every non-head tensor and the norm stats bit-for-bit and attaches a
// freshly initialised head.
ModelParams swap_head(const ModelParams& params, HeadKind new_head, std::uint64_t seed);

// Activations of one pass, row per sample.
struct PassOutput {
  Tensor output;     // [N, 3] or [N, 20]
  Tensor features;   // t = r * z_emb, [N, D]
  Tensor attention;  // [N, tokens]
};

// One forward pass with optional reverse mode. With train_mode the batch
// norms use batch statistics; gradients are produced only for tensors flagged
// in `trainable` (indexed like ModelParams::tensors; empty = none).
class ModelGraph {
 public:
  ModelGraph(const ModelParams& params, bool train_mode, std::vector<bool> trainable = {});

  // images: [N, H, W]; demographics: raw [N, 4]. With use_demographics false
  // every row is replaced by the norm-stats mean (a zero vector after
  // normalisation).
  PassOutput run(const Tensor& images, const Tensor& demographics, bool use_demographics = true);

  // Gradients aligned with ModelParams::tensors; empty where not trainable.
  std::vector<Tensor> backward(const Tensor& d_output);

  struct BatchNormUpdate {
    std::size_t mean_index;
    std::size_t var_index;
    nn::BatchStats stats;
  };
  const std::vector<BatchNormUpdate>& batch_norm_updates() const { return bn_updates_; }

 private:
  nn::Var param(std::string_view name);
  nn::Var conv_bn(const nn::Var& x, const std::string& conv, const std::string& bn, int stride, int pad);

  const ModelParams& params_;
  bool train_mode_;
  std::vector<bool> trainable_;
  std::vector<nn::Var> vars_;
  nn::Tape tape_;
  nn::Var output_;
  std::vector<BatchNormUpdate> bn_updates_;
};

void apply_batch_norm_updates(ModelParams& params, const std::vector<ModelGraph::BatchNormUpdate>& updates,
                              double momentum = 0.1);

// Batch assembly helpers.
Tensor stack_images(std::span<const DrrImage> images);
Tensor stack_demographics(std::span<const Demographics> demographics);

// Inference on a batch: [N, output_width].
Tensor predict(const ModelParams& params, const Tensor& images, const Tensor& demographics,
               bool use_demographics = true);
// Inference trunk features t: [N, D].
Tensor trunk_features(const ModelParams& params, const Tensor& images, const Tensor& demographics,
                      bool use_demographics = true);

struct PosePrediction {
  Real x = 0, y = 0, z = 0;  // normalised raw coordinates, not clamped
};

PosePrediction forward_regression(const ModelParams& params, const DrrImage& image, const Demographics& stats);
// Logit i belongs to landmark id i + 1.
std::array<Real, kClassificationOutputs> forward_classification(const ModelParams& params, const DrrImage& image,
                                                                const Demographics& stats);

struct AttentionResult {
  std::vector<Real> weights;
  std::vector<Real> output;
};

// Scaled dot-product attention of one query over raw key/value vectors.
AttentionResult attend(std::span<const Real> query, const std::vector<std::vector<Real>>& keys,
                       const std::vector<std::vector<Real>>& values);

// The network's cross-attention: query/key/value projections, attention,
// then the output projection.
AttentionResult cross_attention(const ModelParams& params, std::span<const Real> query,
                                const std::vector<std::vector<Real>>& keys, const std::vector<std::vector<Real>>& values);

// Element-wise product of the transformer output and the pooled image
// embedding.
std::vector<Real> fuse(std::span<const Real> r, std::span<const Real> z_emb);

}  // namespace carm
