#include "carm/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "carm/image_io.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace carm {
namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'C', 'A', 'R', 'M', 'C', 'K', 'P', 'T'};

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw ValidationError(what + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ValidationError("unknown key '" + k + "' in " + what);
}

json model_config_json(const ModelConfig& m) {
  return {{"input_resolution", m.input_resolution},
          {"base_width", m.base_width},
          {"blocks", m.blocks},
          {"embed_dim", m.embed_dim},
          {"ffn_dim", m.ffn_dim},
          {"head_hidden", m.head_hidden},
          {"attention_tokens", to_string(m.attention_tokens)}};
}

ModelConfig model_config_from(const json& j) {
  check_keys(j, {"input_resolution", "base_width", "blocks", "embed_dim", "ffn_dim", "head_hidden", "attention_tokens"},
             "model config");
  ModelConfig m;
  if (j.contains("input_resolution")) m.input_resolution = j["input_resolution"].get<int>();
  if (j.contains("base_width")) m.base_width = j["base_width"].get<int>();
  if (j.contains("blocks")) m.blocks = j["blocks"].get<std::array<int, 4>>();
  if (j.contains("embed_dim")) m.embed_dim = j["embed_dim"].get<int>();
  if (j.contains("ffn_dim")) m.ffn_dim = j["ffn_dim"].get<int>();
  if (j.contains("head_hidden")) m.head_hidden = j["head_hidden"].get<int>();
  if (j.contains("attention_tokens")) m.attention_tokens = parse_attention_tokens(j["attention_tokens"].get<std::string>());
  m.validate();
  return m;
}

json train_config_json(const TrainConfig& c) {
  return {{"task", to_string(c.task)},
          {"init", to_string(c.init)},
          {"tune_mode", to_string(c.tune_mode)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"augment", c.augment},
          {"augmentation",
           {{"jitter_strength", c.augmentation.jitter_strength},
            {"posterize_levels", c.augmentation.posterize_levels},
            {"seed", c.augmentation.seed}}},
          {"use_demographics", c.use_demographics},
          {"model", model_config_json(c.model)}};
}

TrainConfig train_config_from(const json& j) {
  check_keys(j,
             {"task", "init", "tune_mode", "learning_rate", "batch_size", "epochs", "seed", "augment", "augmentation",
              "use_demographics", "model"},
             "training config");
  TrainConfig c;
  if (j.contains("task")) c.task = parse_head_kind(j["task"].get<std::string>());
  if (j.contains("init")) c.init = parse_init_kind(j["init"].get<std::string>());
  if (j.contains("tune_mode")) c.tune_mode = parse_tune_mode(j["tune_mode"].get<std::string>());
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("augment")) c.augment = j["augment"].get<bool>();
  if (j.contains("augmentation")) {
    const json& a = j["augmentation"];
    check_keys(a, {"jitter_strength", "posterize_levels", "seed"}, "augmentation config");
    if (a.contains("jitter_strength")) c.augmentation.jitter_strength = a["jitter_strength"].get<double>();
    if (a.contains("posterize_levels")) c.augmentation.posterize_levels = a["posterize_levels"].get<std::int64_t>();
    if (a.contains("seed")) c.augmentation.seed = a["seed"].get<std::uint64_t>();
  }
  if (j.contains("use_demographics")) c.use_demographics = j["use_demographics"].get<bool>();
  if (j.contains("model")) c.model = model_config_from(j["model"]);
  c.validate();
  return c;
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
std::uint64_t get_le(std::span<const unsigned char> bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  return v;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Fnv1a h;
  h.update(&seed, sizeof seed);
  h.update(&epoch, sizeof epoch);
  std::mt19937_64 rng(h.digest());
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

void append_metrics(const std::filesystem::path& out_dir, const EpochStats& s, std::string_view task) {
  if (out_dir.empty()) return;
  json j = {{"epoch", s.epoch}, {"split", "train"}, {"task", task}, {"loss", s.train_loss}, {"wall_time_s", s.wall_time_s}};
  std::ofstream out(out_dir / kMetricsFile, std::ios::app);
  if (!out) throw IoError("cannot append to " + (out_dir / kMetricsFile).string());
  out << j.dump() << '\n';
}

// Loss for one batch: fills d loss / d output and returns the mean loss.
using LossFn = std::function<double(const Tensor& output, std::span<const ManifestRecord* const>, Tensor& grad)>;

Checkpoint run_training(Checkpoint ckpt, const std::vector<bool>& trainable, bool train_mode,
                        const DatasetManifest& manifest, const std::filesystem::path& out_dir, const LossFn& loss_fn,
                        const TrainHooks& hooks) {
  const TrainConfig& config = ckpt.config;
  const auto records = manifest.select(Split::train);
  if (records.empty()) throw ValidationError("training manifest has no train records");
  if (manifest.detector.resolution != ckpt.params.config.input_resolution)
    throw ValidationError("manifest resolution " + std::to_string(manifest.detector.resolution) +
                          " does not match the model input resolution " +
                          std::to_string(ckpt.params.config.input_resolution));
  if (!out_dir.empty()) {
    detail::ensure_directory(out_dir);
    std::filesystem::remove(out_dir / kMetricsFile);
  }
  const std::size_t batch = static_cast<std::size_t>(config.effective_batch_size());
  Adam adam(config.learning_rate);
  if (hooks.on_start) hooks.on_start(ckpt.params);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = permutation(records.size(), config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<const ManifestRecord*> chosen;
      std::vector<std::size_t> indices;
      for (std::size_t i = start; i < end; ++i) {
        chosen.push_back(records[order[i]]);
        indices.push_back(order[i]);
      }
      Batch b = load_batch(manifest, chosen);
      if (config.augment) {
        const std::int64_t plane = b.images.dim(1) * b.images.dim(2);
        for (std::size_t i = 0; i < chosen.size(); ++i) {
          DrrImage img(static_cast<int>(b.images.dim(1)), manifest.detector.detector_mm);
          Real* px = b.images.data() + static_cast<std::int64_t>(i) * plane;
          std::copy(px, px + plane, img.pixels.begin());
          AugmentationConfig a = config.augmentation;
          a.seed = augmentation_seed(config.augmentation.seed, epoch, indices[i]);
          const DrrImage out = augment(img, a);
          std::copy(out.pixels.begin(), out.pixels.end(), px);
        }
      }
      ModelGraph graph(ckpt.params, train_mode, trainable);
      const PassOutput pass = graph.run(b.images, b.demographics, config.use_demographics);
      Tensor grad;
      const double loss = loss_fn(pass.output, chosen, grad);
      if (!std::isfinite(loss)) throw std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      const auto grads = graph.backward(grad);
      adam.step(ckpt.params, grads);
      if (train_mode) apply_batch_norm_updates(ckpt.params, graph.batch_norm_updates());
      loss_sum += loss * static_cast<double>(chosen.size());
      if (hooks.after_step) hooks.after_step(ckpt.params);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(records.size());
    stats.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ckpt.epoch = epoch;
    ckpt.train_loss_history.push_back(stats.train_loss);
    if (!out_dir.empty()) save_checkpoint(ckpt, out_dir / kCheckpointFile);
    append_metrics(out_dir, stats, to_string(config.task));
    if (hooks.on_epoch) hooks.on_epoch(stats);
  }
  return ckpt;
}

}  // namespace

std::string_view to_string(InitKind kind) { return kind == InitKind::random ? "random" : "pretext"; }

InitKind parse_init_kind(std::string_view text) {
  if (text == "random") return InitKind::random;
  if (text == "pretext") return InitKind::pretext;
  throw ValidationError("unknown init '" + std::string(text) + "' (expected random or pretext)");
}

std::string_view to_string(TuneMode mode) {
  switch (mode) {
    case TuneMode::full: return "full";
    case TuneMode::probe2: return "probe2";
    case TuneMode::probe1: return "probe1";
  }
  return "?";
}

TuneMode parse_tune_mode(std::string_view text) {
  if (text == "full") return TuneMode::full;
  if (text == "probe2") return TuneMode::probe2;
  if (text == "probe1") return TuneMode::probe1;
  throw ValidationError("unknown tune mode '" + std::string(text) + "' (expected full, probe2 or probe1)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be positive");
  if (batch_size < 0) throw ValidationError("batch_size must be non-negative");
  if (epochs < 1) throw ValidationError("epochs must be at least 1");
  if (task == HeadKind::regression && tune_mode != TuneMode::full)
    throw ValidationError("probe tune modes require the classification task");
  if (task == HeadKind::regression && init == InitKind::pretext)
    throw ValidationError("pretext initialisation applies to classification fine-tuning only");
  augmentation.validate();
  model.validate();
}

int TrainConfig::effective_batch_size() const {
  if (batch_size > 0) return batch_size;
  return task == HeadKind::regression ? kDefaultRegressionBatch : kDefaultClassificationBatch;
}

std::string train_config_to_json(const TrainConfig& config) { return train_config_json(config).dump(2); }

TrainConfig train_config_from_json(std::string_view text) {
  try {
    return train_config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed training config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  const ModelParams& p = ckpt.params;
  json tensors = json::array();
  for (const auto& t : p.tensors)
    tensors.push_back({{"name", t.name}, {"group", to_string(t.group)}, {"buffer", t.buffer}, {"shape", t.value.shape()}});
  json manifest = {{"schema_version", kCheckpointVersion},
                   {"head", to_string(p.head)},
                   {"embed_dim", p.config.embed_dim},
                   {"attention_tokens", to_string(p.config.attention_tokens)},
                   {"model", model_config_json(p.config)},
                   {"norm_stats", {{"mean", p.norm_stats.mean}, {"stddev", p.norm_stats.stddev}}},
                   {"config", train_config_json(ckpt.config)},
                   {"epoch", ckpt.epoch},
                   {"train_loss_history", ckpt.train_loss_history},
                   {"tensors", std::move(tensors)}};
  const std::string text = manifest.dump();
  std::vector<unsigned char> out(kMagic, kMagic + 8);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : p.tensors) {
    for (Real v : t.value.values()) {
      const auto f = static_cast<float>(v);
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ValidationError("not a checkpoint archive");
  const auto version = static_cast<int>(get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t len = get_le(bytes, 12, 8);
  if (20 + len > bytes.size()) throw ValidationError("truncated checkpoint manifest");
  Checkpoint ckpt;
  try {
    const json m = json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
    ckpt.params.head = parse_head_kind(m.at("head").get<std::string>());
    ckpt.params.config = model_config_from(m.at("model"));
    if (m.at("embed_dim").get<int>() != ckpt.params.config.embed_dim)
      throw ValidationError("checkpoint embed_dim disagrees with its model config");
    ckpt.params.norm_stats.mean = m.at("norm_stats").at("mean").get<std::array<double, kDemographicFields>>();
    ckpt.params.norm_stats.stddev = m.at("norm_stats").at("stddev").get<std::array<double, kDemographicFields>>();
    ckpt.params.norm_stats.validate();
    ckpt.config = train_config_from(m.at("config"));
    ckpt.epoch = m.at("epoch").get<int>();
    ckpt.train_loss_history = m.at("train_loss_history").get<std::vector<double>>();
    if (static_cast<int>(ckpt.train_loss_history.size()) != ckpt.epoch)
      throw ValidationError("checkpoint loss history length differs from its epoch count");

    const auto layout = parameter_layout(ckpt.params.config, ckpt.params.head);
    const json& table = m.at("tensors");
    if (table.size() != layout.size())
      throw ValidationError("checkpoint holds " + std::to_string(table.size()) + " tensors, expected " +
                            std::to_string(layout.size()));
    std::size_t offset = 20 + len;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& spec = layout[i];
      const std::string name = table[i].at("name").get<std::string>();
      const Shape shape = table[i].at("shape").get<Shape>();
      if (name != spec.name) throw ValidationError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" + spec.name + "'");
      if (shape != spec.shape)
        throw ValidationError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " + shape_string(spec.shape));
      Tensor t(shape);
      if (offset + static_cast<std::size_t>(t.numel()) * 4 > bytes.size())
        throw ValidationError("truncated checkpoint tensor data at '" + name + "'");
      for (std::int64_t k = 0; k < t.numel(); ++k, offset += 4)
        t[k] = static_cast<Real>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, offset, 4))));
      ckpt.params.tensors.push_back({spec.name, spec.group, spec.buffer, std::move(t)});
    }
    if (offset != bytes.size()) throw ValidationError("trailing bytes after checkpoint tensors");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(checkpoint);
  detail::write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(file)) file /= kCheckpointFile;
  const std::string data = detail::read_file(file);
  return deserialize_checkpoint(std::span(reinterpret_cast<const unsigned char*>(data.data()), data.size()));
}

// ---------------------------------------------------------------------------
// Losses and optimisation.

double mse_loss(const Tensor& pred, const Tensor& target, Tensor* grad) {
  if (!pred.same_shape(target) || pred.rank() != 2 || pred.dim(1) != kRegressionOutputs)
    throw ValidationError("mse_loss needs matching [N, 3] prediction and target, got " + shape_string(pred.shape()) +
                          " and " + shape_string(target.shape()));
  if (pred.numel() == 0) throw ValidationError("mse_loss needs a non-empty batch");
  const double n = static_cast<double>(pred.numel());
  double sum = 0.0;
  if (grad) *grad = Tensor(pred.shape());
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += d * d;
    if (grad) (*grad)[i] = static_cast<Real>(2.0 * d / n);
  }
  return sum / n;
}

double cross_entropy_loss(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(1) != kClassificationOutputs)
    throw ValidationError("cross_entropy_loss needs [N, 20] logits, got " + shape_string(logits.shape()));
  const std::int64_t n = logits.dim(0);
  if (n < 1 || static_cast<std::int64_t>(labels.size()) != n)
    throw ValidationError("cross_entropy_loss needs one label per row");
  for (int l : labels)
    if (l < 1 || l > kClassificationOutputs) throw ValidationError("label " + std::to_string(l) + " outside 1..20");
  if (grad) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    const Real* row = logits.data() + r * kClassificationOutputs;
    double mx = row[0];
    for (int c = 1; c < kClassificationOutputs; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (int c = 0; c < kClassificationOutputs; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    const int target = labels[static_cast<std::size_t>(r)] - 1;
    total += lse - row[target];
    if (grad) {
      for (int c = 0; c < kClassificationOutputs; ++c) {
        const double p = std::exp(row[c] - lse);
        (*grad)[r * kClassificationOutputs + c] = static_cast<Real>((p - (c == target ? 1.0 : 0.0)) / double(n));
      }
    }
  }
  return total / static_cast<double>(n);
}

std::vector<bool> set_trainable(const ModelParams& params, TuneMode mode) {
  if (mode != TuneMode::full && params.head != HeadKind::classification)
    throw ContractError("probe tune modes need a classification head");
  std::vector<bool> mask(params.tensors.size(), false);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.buffer) continue;
    switch (mode) {
      case TuneMode::full: mask[i] = true; break;
      case TuneMode::probe2: mask[i] = t.name.starts_with("head.fc1.") || t.name.starts_with("head.fc2."); break;
      case TuneMode::probe1: mask[i] = t.name.starts_with("head.fc2."); break;
    }
  }
  return mask;
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(epsilon) {
  if (!(learning_rate > 0)) throw ValidationError("learning rate must be positive");
}

void Adam::step(ModelParams& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.tensors.size()) throw ValidationError("gradient list does not match the parameters");
  if (m_.empty()) {
    m_.resize(grads.size());
    v_.resize(grads.size());
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Tensor& g = grads[i];
    if (g.empty()) continue;
    Tensor& p = params.tensors[i].value;
    if (!g.same_shape(p)) throw ValidationError("gradient shape mismatch for " + params.tensors[i].name);
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(p.numel()), 0.0);
      v.assign(static_cast<std::size_t>(p.numel()), 0.0);
    }
    for (std::int64_t k = 0; k < p.numel(); ++k) {
      const auto kk = static_cast<std::size_t>(k);
      const double gk = g[k];
      m[kk] = b1_ * m[kk] + (1.0 - b1_) * gk;
      v[kk] = b2_ * v[kk] + (1.0 - b2_) * gk * gk;
      const double m_hat = m[kk] / c1;
      const double v_hat = v[kk] / c2;
      p[k] = static_cast<Real>(p[k] - lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
}

NormStats compute_norm_stats(const DatasetManifest& manifest) {
  const auto ids = manifest.case_ids(Split::train);
  if (ids.empty()) throw ValidationError("no train cases to compute demographic statistics from");
  NormStats s;
  for (int f = 0; f < kDemographicFields; ++f) {
    double mean = 0.0;
    for (const auto& id : ids) mean += manifest.case_info(id).demographics.as_array()[static_cast<std::size_t>(f)];
    mean /= static_cast<double>(ids.size());
    double var = 0.0;
    for (const auto& id : ids) {
      const double d = manifest.case_info(id).demographics.as_array()[static_cast<std::size_t>(f)] - mean;
      var += d * d;
    }
    var /= static_cast<double>(ids.size());
    s.mean[static_cast<std::size_t>(f)] = mean;
    s.stddev[static_cast<std::size_t>(f)] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Batch load_batch(const DatasetManifest& manifest, std::span<const ManifestRecord* const> records) {
  if (records.empty()) throw ValidationError("empty batch");
  const int res = manifest.detector.resolution;
  Batch b{Tensor({static_cast<std::int64_t>(records.size()), res, res}),
          Tensor({static_cast<std::int64_t>(records.size()), kDemographicFields})};
  for (std::size_t i = 0; i < records.size(); ++i) {
    const DrrImage img = read_png16(manifest.image_file(*records[i]), manifest.detector.detector_mm);
    if (img.resolution != res)
      throw ValidationError("image " + records[i]->image_path + " has resolution " + std::to_string(img.resolution) +
                            ", manifest declares " + std::to_string(res));
    std::copy(img.pixels.begin(), img.pixels.end(), b.images.data() + static_cast<std::int64_t>(i) * res * res);
    const auto d = manifest.case_info(records[i]->case_id).demographics.as_array();
    for (int f = 0; f < kDemographicFields; ++f)
      b.demographics[static_cast<std::int64_t>(i) * kDemographicFields + f] = static_cast<Real>(d[static_cast<std::size_t>(f)]);
  }
  return b;
}

Tensor pose_targets(std::span<const ManifestRecord* const> records) {
  Tensor t({static_cast<std::int64_t>(records.size()), kRegressionOutputs});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto k = static_cast<std::int64_t>(i) * 3;
    t[k] = static_cast<Real>(records[i]->pose_raw.x);
    t[k + 1] = static_cast<Real>(records[i]->pose_raw.y);
    t[k + 2] = static_cast<Real>(records[i]->pose_raw.z);
  }
  return t;
}

Checkpoint pretrain_regression(const TrainConfig& config, const DatasetManifest& train_manifest,
                               const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  config.validate();
  if (config.task != HeadKind::regression) throw ValidationError("pretraining needs task = regression");
  if (train_manifest.task != DatasetTask::regression) throw ValidationError("pretraining needs a regression manifest");
  if (train_manifest.select(Split::train).empty()) throw ValidationError("training manifest has no train records");
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.params = init_params(config.model, HeadKind::regression, config.seed);
  ckpt.params.norm_stats = compute_norm_stats(train_manifest);
  const auto mask = set_trainable(ckpt.params, TuneMode::full);
  LossFn loss = [](const Tensor& out, std::span<const ManifestRecord* const> recs, Tensor& grad) {
    return mse_loss(out, pose_targets(recs), &grad);
  };
  return run_training(std::move(ckpt), mask, true, train_manifest, out_dir, loss, hooks);
}

Checkpoint finetune_classification(const TrainConfig& config, const std::optional<Checkpoint>& init_checkpoint,
                                   const DatasetManifest& train_manifest, const std::filesystem::path& out_dir,
                                   const TrainHooks& hooks) {
  config.validate();
  if (config.task != HeadKind::classification) throw ValidationError("fine-tuning needs task = classification");
  if (train_manifest.task != DatasetTask::classification)
    throw ValidationError("fine-tuning needs a classification manifest");
  if (train_manifest.select(Split::train).empty()) throw ValidationError("training manifest has no train records");
  Checkpoint ckpt;
  ckpt.config = config;
  if (config.init == InitKind::pretext) {
    if (!init_checkpoint) throw ValidationError("init = pretext needs a pretext checkpoint");
    ckpt.params = swap_head(init_checkpoint->params, HeadKind::classification, config.seed);
    ckpt.config.model = ckpt.params.config;
  } else {
    ckpt.params = init_params(config.model, HeadKind::classification, config.seed);
    ckpt.params.norm_stats = compute_norm_stats(train_manifest);
  }
  const auto mask = set_trainable(ckpt.params, config.tune_mode);
  LossFn loss = [](const Tensor& out, std::span<const ManifestRecord* const> recs, Tensor& grad) {
    std::vector<int> labels;
    labels.reserve(recs.size());
    for (const auto* r : recs) labels.push_back(*r->label);
    return cross_entropy_loss(out, labels, &grad);
  };
  return run_training(std::move(ckpt), mask, config.tune_mode == TuneMode::full, train_manifest, out_dir, loss, hooks);
}

}  // namespace carm
