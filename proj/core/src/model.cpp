#include "carm/model.hpp"

#include <cmath>
#include <random>
#include <utility>

#include "carm/drr.hpp"
#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "carm/phantom.hpp"

namespace carm {
namespace {

using nn::Var;

std::string stage_prefix(int stage, int block) {
  return "encoder.layer" + std::to_string(stage + 1) + "." + std::to_string(block) + ".";
}

// Stage 0 keeps width and resolution; later stages open with a strided
// projection shortcut.
bool needs_downsample(int stage, int block) { return block == 0 && stage > 0; }

void add_bn(std::vector<TensorSpec>& out, const std::string& prefix, std::int64_t channels) {
  out.push_back({prefix + ".weight", ParamGroup::encoder, false, {channels}});
  out.push_back({prefix + ".bias", ParamGroup::encoder, false, {channels}});
  out.push_back({prefix + ".running_mean", ParamGroup::encoder, true, {channels}});
  out.push_back({prefix + ".running_var", ParamGroup::encoder, true, {channels}});
}

void add_linear(std::vector<TensorSpec>& out, const std::string& prefix, ParamGroup group, std::int64_t out_dim,
                std::int64_t in_dim) {
  out.push_back({prefix + ".weight", group, false, {out_dim, in_dim}});
  out.push_back({prefix + ".bias", group, false, {out_dim}});
}

std::vector<TensorSpec> head_layout(const ModelConfig& c, HeadKind head) {
  std::vector<TensorSpec> out;
  const int width = head == HeadKind::regression ? kRegressionOutputs : kClassificationOutputs;
  add_linear(out, "head.fc1", ParamGroup::head, c.head_hidden, c.embed_dim);
  add_linear(out, "head.fc2", ParamGroup::head, width, c.head_hidden);
  return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view salt, std::string_view name) {
  Fnv1a h;
  h.update(&seed, sizeof seed);
  h.update(salt);
  h.update("/");
  h.update(name);
  return h.digest();
}

// Convolutions: He normal over fan-in. Affine layers: U(-1/sqrt(fan_in),
// 1/sqrt(fan_in)) for weight and bias. Normalisation scales 1, shifts 0.
std::vector<ParamTensor> initialise(const std::vector<TensorSpec>& layout, std::uint64_t seed, std::string_view salt) {
  std::vector<ParamTensor> out;
  out.reserve(layout.size());
  std::int64_t affine_fan_in = 0;
  for (const TensorSpec& s : layout) {
    Tensor t(s.shape);
    std::mt19937_64 rng(stream_seed(seed, salt, s.name));
    if (s.shape.size() == 4) {
      const double fan_in = static_cast<double>(s.shape[1] * s.shape[2] * s.shape[3]);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
    } else if (s.shape.size() == 2 || (affine_fan_in > 0 && s.name.ends_with(".bias"))) {
      if (s.shape.size() == 2) affine_fan_in = s.shape[1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(affine_fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
      if (s.shape.size() == 1) affine_fan_in = 0;
    } else if (s.name.ends_with(".weight") || s.name.ends_with(".running_var")) {
      t.fill(1);
    }
    out.push_back({s.name, s.group, s.buffer, std::move(t)});
  }
  return out;
}

std::uint64_t hash_tensors(const ModelParams& p, int which) {  // 0 all, 1 trunk, 2 head
  Fnv1a h;
  for (const auto& t : p.tensors) {
    const bool is_head = t.group == ParamGroup::head;
    if ((which == 1 && is_head) || (which == 2 && !is_head)) continue;
    h.update(t.name);
    h.update(t.value.shape().data(), t.value.shape().size() * sizeof(std::int64_t));
    h.update(t.value.values());
  }
  return h.digest();
}

}  // namespace

std::string_view to_string(HeadKind kind) { return kind == HeadKind::regression ? "regression" : "classification"; }

HeadKind parse_head_kind(std::string_view text) {
  if (text == "regression") return HeadKind::regression;
  if (text == "classification") return HeadKind::classification;
  throw ValidationError("unknown head kind '" + std::string(text) + "'");
}

std::string_view to_string(AttentionTokens mode) { return mode == AttentionTokens::spatial ? "spatial" : "pooled"; }

AttentionTokens parse_attention_tokens(std::string_view text) {
  if (text == "spatial") return AttentionTokens::spatial;
  if (text == "pooled") return AttentionTokens::pooled;
  throw ValidationError("unknown attention_tokens mode '" + std::string(text) + "'");
}

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::projector: return "projector";
    case ParamGroup::demographic: return "demographic";
    case ParamGroup::attention: return "attention";
    case ParamGroup::head: return "head";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (input_resolution < 8) throw ValidationError("model input_resolution must be at least 8");
  if (base_width < 1 || embed_dim < 1 || ffn_dim < 1 || head_hidden < 1)
    throw ValidationError("model widths must be positive");
  for (int b : blocks)
    if (b < 1) throw ValidationError("every residual stage needs at least one block");
}

void NormStats::validate() const {
  for (double s : stddev)
    if (!(s > 0) || !std::isfinite(s)) throw ValidationError("norm_stats standard deviations must be positive");
  for (double m : mean)
    if (!std::isfinite(m)) throw ValidationError("norm_stats means must be finite");
}

std::size_t ModelParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return i;
  throw ValidationError("model has no tensor named '" + std::string(name) + "'");
}

std::uint64_t ModelParams::hash() const {
  Fnv1a h;
  const std::uint64_t body = hash_tensors(*this, 0);
  h.update(&body, sizeof body);
  h.update(to_string(head));
  h.update(norm_stats.mean.data(), sizeof norm_stats.mean);
  h.update(norm_stats.stddev.data(), sizeof norm_stats.stddev);
  return h.digest();
}
std::uint64_t ModelParams::trunk_hash() const { return hash_tensors(*this, 1); }
std::uint64_t ModelParams::head_hash() const { return hash_tensors(*this, 2); }

std::int64_t ModelParams::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& t : tensors)
    if (!t.buffer) n += t.value.numel();
  return n;
}

std::vector<TensorSpec> parameter_layout(const ModelConfig& c, HeadKind head) {
  c.validate();
  std::vector<TensorSpec> out;
  const std::int64_t w = c.base_width;
  out.push_back({"encoder.stem.conv.weight", ParamGroup::encoder, false, {w, 1, 7, 7}});
  add_bn(out, "encoder.stem.bn", w);
  std::int64_t in = w;
  for (int stage = 0; stage < 4; ++stage) {
    const std::int64_t width = w << stage;
    for (int b = 0; b < c.blocks[static_cast<std::size_t>(stage)]; ++b) {
      const std::string p = stage_prefix(stage, b);
      out.push_back({p + "conv1.weight", ParamGroup::encoder, false, {width, in, 3, 3}});
      add_bn(out, p + "bn1", width);
      out.push_back({p + "conv2.weight", ParamGroup::encoder, false, {width, width, 3, 3}});
      add_bn(out, p + "bn2", width);
      if (needs_downsample(stage, b)) {
        out.push_back({p + "downsample.conv.weight", ParamGroup::encoder, false, {width, in, 1, 1}});
        add_bn(out, p + "downsample.bn", width);
      }
      in = width;
    }
  }
  const std::int64_t d = c.embed_dim;
  add_linear(out, "projector", ParamGroup::projector, d, in);
  add_linear(out, "demographic.fc1", ParamGroup::demographic, d, kDemographicFields);
  add_linear(out, "demographic.fc2", ParamGroup::demographic, d, d);
  add_linear(out, "attention.query", ParamGroup::attention, d, d);
  add_linear(out, "attention.key", ParamGroup::attention, d, d);
  add_linear(out, "attention.value", ParamGroup::attention, d, d);
  add_linear(out, "attention.output", ParamGroup::attention, d, d);
  out.push_back({"attention.norm.weight", ParamGroup::attention, false, {d}});
  out.push_back({"attention.norm.bias", ParamGroup::attention, false, {d}});
  add_linear(out, "attention.ffn1", ParamGroup::attention, c.ffn_dim, d);
  add_linear(out, "attention.ffn2", ParamGroup::attention, d, c.ffn_dim);
  for (auto& s : head_layout(c, head)) out.push_back(std::move(s));
  return out;
}

ModelParams init_params(const ModelConfig& config, HeadKind head, std::uint64_t seed) {
  ModelParams p;
  p.config = config;
  p.head = head;
  p.tensors = initialise(parameter_layout(config, head), seed, "init");
  return p;
}

ModelParams swap_head(const ModelParams& params, HeadKind new_head, std::uint64_t seed) {
  ModelParams out;
  out.config = params.config;
  out.head = new_head;
  out.norm_stats = params.norm_stats;
  for (const auto& t : params.tensors)
    if (t.group != ParamGroup::head) out.tensors.push_back(t);
  for (auto& t : initialise(head_layout(params.config, new_head), seed, "swap_head")) out.tensors.push_back(std::move(t));
  return out;
}

// ---------------------------------------------------------------------------

ModelGraph::ModelGraph(const ModelParams& params, bool train_mode, std::vector<bool> trainable)
    : params_(params), train_mode_(train_mode), trainable_(std::move(trainable)) {
  if (!trainable_.empty() && trainable_.size() != params_.tensors.size())
    throw ValidationError("trainable mask size does not match the parameter list");
  vars_.resize(params_.tensors.size());
}

Var ModelGraph::param(std::string_view name) {
  const std::size_t i = params_.index_of(name);
  if (!vars_[i]) {
    const bool grad = !trainable_.empty() && trainable_[i] && !params_.tensors[i].buffer;
    vars_[i] = grad ? nn::variable(params_.tensors[i].value) : nn::constant(params_.tensors[i].value);
  }
  return vars_[i];
}

Var ModelGraph::conv_bn(const Var& x, const std::string& conv, const std::string& bn, int stride, int pad) {
  nn::Tape* tape = &tape_;
  Var y = nn::conv2d(tape, x, param(conv + ".weight"), stride, pad);
  nn::BatchStats stats;
  y = nn::batch_norm(tape, y, param(bn + ".weight"), param(bn + ".bias"), params_.at(bn + ".running_mean"),
                     params_.at(bn + ".running_var"), train_mode_, train_mode_ ? &stats : nullptr);
  if (train_mode_)
    bn_updates_.push_back({params_.index_of(bn + ".running_mean"), params_.index_of(bn + ".running_var"), std::move(stats)});
  return y;
}

PassOutput ModelGraph::run(const Tensor& images, const Tensor& demographics, bool use_demographics) {
  const ModelConfig& c = params_.config;
  if (images.rank() != 3) throw ValidationError("images must be [N, H, W]");
  const std::int64_t n = images.dim(0);
  if (n < 1) throw ValidationError("empty batch");
  if (images.dim(1) != c.input_resolution || images.dim(2) != c.input_resolution)
    throw ValidationError("image resolution " + std::to_string(images.dim(1)) + " does not match the model's " +
                          std::to_string(c.input_resolution));
  if (demographics.rank() != 2 || demographics.dim(0) != n || demographics.dim(1) != kDemographicFields)
    throw ValidationError("demographics must be [N, 4]");
  params_.norm_stats.validate();
  tape_.clear();
  bn_updates_.clear();
  nn::Tape* tape = &tape_;

  // Image encoder.
  Tensor x_in = images;
  x_in.reshape({1, n, images.dim(1), images.dim(2)});
  Var x = nn::constant(std::move(x_in));
  x = nn::relu(tape, conv_bn(x, "encoder.stem.conv", "encoder.stem.bn", 2, 3));
  x = nn::max_pool3x3s2(tape, x);
  for (int stage = 0; stage < 4; ++stage) {
    for (int b = 0; b < c.blocks[static_cast<std::size_t>(stage)]; ++b) {
      const std::string p = stage_prefix(stage, b);
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      Var h = nn::relu(tape, conv_bn(x, p + "conv1", p + "bn1", stride, 1));
      h = conv_bn(h, p + "conv2", p + "bn2", 1, 1);
      Var shortcut = needs_downsample(stage, b) ? conv_bn(x, p + "downsample.conv", p + "downsample.bn", stride, 0) : x;
      x = nn::relu(tape, nn::add(tape, h, shortcut));
    }
  }

  // Image tokens and pooled embedding.
  Var tokens = nn::linear(tape, nn::spatial_tokens(tape, x), param("projector.weight"), param("projector.bias"));
  Var z_emb = nn::mean_tokens(tape, tokens, n);
  if (c.attention_tokens == AttentionTokens::pooled) tokens = z_emb;

  // Demographic embedding.
  Tensor s({n, kDemographicFields});
  for (std::int64_t i = 0; i < n; ++i)
    for (int f = 0; f < kDemographicFields; ++f) {
      const double raw = use_demographics ? demographics[i * kDemographicFields + f]
                                          : params_.norm_stats.mean[static_cast<std::size_t>(f)];
      s[i * kDemographicFields + f] = static_cast<Real>((raw - params_.norm_stats.mean[static_cast<std::size_t>(f)]) /
                                                        params_.norm_stats.stddev[static_cast<std::size_t>(f)]);
    }
  Var f_stats = nn::linear(tape, nn::constant(std::move(s)), param("demographic.fc1.weight"), param("demographic.fc1.bias"));
  f_stats = nn::linear(tape, nn::relu(tape, f_stats), param("demographic.fc2.weight"), param("demographic.fc2.bias"));

  // Cross-attention (query from demographics, keys/values from image tokens)
  // inside a pre-norm residual transformer block on the query stream.
  Var q = nn::linear(tape, f_stats, param("attention.query.weight"), param("attention.query.bias"));
  Var k = nn::linear(tape, tokens, param("attention.key.weight"), param("attention.key.bias"));
  Var v = nn::linear(tape, tokens, param("attention.value.weight"), param("attention.value.bias"));
  Tensor weights;
  Var ctx = nn::attention(tape, q, k, v, n, &weights);
  Var attn = nn::linear(tape, ctx, param("attention.output.weight"), param("attention.output.bias"));
  Var h = nn::add(tape, f_stats, attn);
  Var ff = nn::layer_norm(tape, h, param("attention.norm.weight"), param("attention.norm.bias"));
  ff = nn::relu(tape, nn::linear(tape, ff, param("attention.ffn1.weight"), param("attention.ffn1.bias")));
  ff = nn::linear(tape, ff, param("attention.ffn2.weight"), param("attention.ffn2.bias"));
  Var r = nn::add(tape, ff, h);

  Var t = nn::mul(tape, r, z_emb);

  Var y = nn::relu(tape, nn::linear(tape, t, param("head.fc1.weight"), param("head.fc1.bias")));
  y = nn::linear(tape, y, param("head.fc2.weight"), param("head.fc2.bias"));
  output_ = y;
  return {y->value, t->value, std::move(weights)};
}

std::vector<Tensor> ModelGraph::backward(const Tensor& d_output) {
  if (!output_) throw ContractError("backward called before run");
  std::vector<Tensor> grads(params_.tensors.size());
  if (output_->requires_grad) tape_.backward(output_, d_output);
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i] || !vars_[i]->requires_grad) continue;
    grads[i] = vars_[i]->grad.empty() ? Tensor(params_.tensors[i].value.shape()) : std::move(vars_[i]->grad);
  }
  tape_.clear();
  return grads;
}

void apply_batch_norm_updates(ModelParams& params, const std::vector<ModelGraph::BatchNormUpdate>& updates,
                              double momentum) {
  for (const auto& u : updates) {
    Tensor& mean = params.tensors[u.mean_index].value;
    Tensor& var = params.tensors[u.var_index].value;
    for (std::int64_t c = 0; c < mean.numel(); ++c) {
      const auto ci = static_cast<std::size_t>(c);
      mean[c] = static_cast<Real>((1.0 - momentum) * mean[c] + momentum * u.stats.mean[ci]);
      var[c] = static_cast<Real>((1.0 - momentum) * var[c] + momentum * u.stats.var_unbiased[ci]);
    }
  }
}

Tensor stack_images(std::span<const DrrImage> images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const int res = images.front().resolution;
  Tensor out({static_cast<std::int64_t>(images.size()), res, res});
  Real* dst = out.data();
  for (const auto& img : images) {
    if (img.resolution != res) throw ValidationError("images in a batch must share one resolution");
    for (float p : img.pixels) *dst++ = static_cast<Real>(p);
  }
  return out;
}

Tensor stack_demographics(std::span<const Demographics> demographics) {
  Tensor out({static_cast<std::int64_t>(demographics.size()), kDemographicFields});
  std::int64_t i = 0;
  for (const auto& d : demographics)
    for (double v : d.as_array()) out[i++] = static_cast<Real>(v);
  return out;
}

Tensor predict(const ModelParams& params, const Tensor& images, const Tensor& demographics, bool use_demographics) {
  ModelGraph g(params, false);
  return g.run(images, demographics, use_demographics).output;
}

Tensor trunk_features(const ModelParams& params, const Tensor& images, const Tensor& demographics, bool use_demographics) {
  ModelGraph g(params, false);
  return g.run(images, demographics, use_demographics).features;
}

PosePrediction forward_regression(const ModelParams& params, const DrrImage& image, const Demographics& stats) {
  if (params.head != HeadKind::regression) throw ContractError("forward_regression needs a regression head");
  const Tensor out = predict(params, stack_images(std::span(&image, 1)), stack_demographics(std::span(&stats, 1)));
  return {out[0], out[1], out[2]};
}

std::array<Real, kClassificationOutputs> forward_classification(const ModelParams& params, const DrrImage& image,
                                                                const Demographics& stats) {
  if (params.head != HeadKind::classification) throw ContractError("forward_classification needs a classification head");
  const Tensor out = predict(params, stack_images(std::span(&image, 1)), stack_demographics(std::span(&stats, 1)));
  std::array<Real, kClassificationOutputs> logits{};
  for (int i = 0; i < kClassificationOutputs; ++i) logits[static_cast<std::size_t>(i)] = out[i];
  return logits;
}

namespace {

Tensor rows_tensor(const std::vector<std::vector<Real>>& rows, std::size_t width, const char* what) {
  Tensor t({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(width)});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != width) throw ValidationError(std::string(what) + " vectors must match the query length");
    for (std::size_t i = 0; i < width; ++i) t[static_cast<std::int64_t>(r * width + i)] = rows[r][i];
  }
  return t;
}

AttentionResult attention_result(const Var& out, const Tensor& weights) {
  return {std::vector<Real>(weights.values().begin(), weights.values().end()),
          std::vector<Real>(out->value.values().begin(), out->value.values().end())};
}

}  // namespace

AttentionResult attend(std::span<const Real> query, const std::vector<std::vector<Real>>& keys,
                       const std::vector<std::vector<Real>>& values) {
  if (keys.empty()) throw ValidationError("attention needs at least one key");
  if (keys.size() != values.size()) throw ValidationError("attention needs one value per key");
  const std::size_t d = query.size();
  Var q = nn::constant(Tensor({1, static_cast<std::int64_t>(d)}, std::vector<Real>(query.begin(), query.end())));
  Var k = nn::constant(rows_tensor(keys, d, "key"));
  Var v = nn::constant(rows_tensor(values, d, "value"));
  Tensor w;
  Var out = nn::attention(nullptr, q, k, v, 1, &w);
  return attention_result(out, w);
}

AttentionResult cross_attention(const ModelParams& params, std::span<const Real> query,
                                const std::vector<std::vector<Real>>& keys, const std::vector<std::vector<Real>>& values) {
  if (keys.empty()) throw ValidationError("attention needs at least one key");
  if (keys.size() != values.size()) throw ValidationError("attention needs one value per key");
  const std::size_t d = query.size();
  if (static_cast<int>(d) != params.config.embed_dim) throw ValidationError("query length must equal the embedding dim");
  auto w = [&](const char* name) { return nn::constant(params.at(name)); };
  Var q = nn::constant(Tensor({1, static_cast<std::int64_t>(d)}, std::vector<Real>(query.begin(), query.end())));
  q = nn::linear(nullptr, q, w("attention.query.weight"), w("attention.query.bias"));
  Var k = nn::linear(nullptr, nn::constant(rows_tensor(keys, d, "key")), w("attention.key.weight"), w("attention.key.bias"));
  Var v = nn::linear(nullptr, nn::constant(rows_tensor(values, d, "value")), w("attention.value.weight"),
                     w("attention.value.bias"));
  Tensor weights;
  Var ctx = nn::attention(nullptr, q, k, v, 1, &weights);
  Var out = nn::linear(nullptr, ctx, w("attention.output.weight"), w("attention.output.bias"));
  return attention_result(out, weights);
}

std::vector<Real> fuse(std::span<const Real> r, std::span<const Real> z_emb) {
  if (r.size() != z_emb.size())
    throw ValidationError("fuse needs equal lengths, got " + std::to_string(r.size()) + " and " + std::to_string(z_emb.size()));
  std::vector<Real> t(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) t[i] = r[i] * z_emb[i];
  return t;
}

}  // namespace carm
