#include <algorithm>
#include <cmath>
#include <random>

#include "carm/dataset.hpp"
#include "carm/error.hpp"
#include "carm/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace carm;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.input_resolution = 16;
  c.base_width = 4;
  c.blocks = {1, 1, 1, 1};
  c.embed_dim = 16;
  c.ffn_dim = 32;
  c.head_hidden = 16;
  return c;
}

std::vector<Phantom> cohort(int n) {
  std::vector<Phantom> out;
  for (int i = 0; i < n; ++i) {
    Demographics d;
    d.age_years = 30 + 5 * i;
    d.sex = i % 2;
    d.height_mm = 1600 + 20 * i;
    d.weight_kg = 60 + 3 * i;
    out.push_back(testing::box_phantom("case-" + std::to_string(i), 20, 40, 10, 3.0, d));
  }
  return out;
}

const DetectorSpec kDetector{48, 16};

TrainConfig regression_config(int epochs, std::uint64_t seed) {
  TrainConfig c;
  c.model = toy();
  c.epochs = epochs;
  c.seed = seed;
  c.batch_size = 8;
  c.learning_rate = 3e-3;
  c.augment = false;
  return c;
}

TrainConfig classification_config(TuneMode mode, int epochs, std::uint64_t seed) {
  TrainConfig c = regression_config(epochs, seed);
  c.task = HeadKind::classification;
  c.tune_mode = mode;
  return c;
}

std::vector<const ManifestRecord*> all_records(const DatasetManifest& m) {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : m.records) out.push_back(&r);
  return out;
}

}  // namespace

TEST_CASE("mean squared error matches its definition") {
  const Tensor zero({4, 3}, 0.25f);
  CHECK(mse_loss(zero, zero) == 0.0);
  Tensor pred({2, 3}, std::vector<Real>{1, 2, 3, 4, 5, 6});
  Tensor target({2, 3}, std::vector<Real>{0, 2, 1, 4, 8, 6});
  Tensor grad;
  CHECK(mse_loss(pred, target, &grad) == doctest::Approx((1.0 + 4.0 + 9.0) / 6.0));
  CHECK(grad[0] == doctest::Approx(2.0 / 6.0));
  CHECK(grad[4] == doctest::Approx(-6.0 / 6.0));
  CHECK_THROWS_AS(mse_loss(pred, Tensor({3, 3})), ValidationError);
}

TEST_CASE("cross-entropy matches log-sum-exp") {
  const Tensor uniform({3, 20}, 0.7f);
  const std::vector<int> labels = {1, 7, 20};
  CHECK(std::abs(cross_entropy_loss(uniform, labels) - std::log(20.0)) < 1e-8);

  Tensor confident({1, 20}, 0.0f);
  confident[4] = 50;
  const std::vector<int> right = {5}, wrong = {6};
  CHECK(cross_entropy_loss(confident, right) < 1e-12);
  CHECK(cross_entropy_loss(confident, wrong) == doctest::Approx(50.0).epsilon(1e-9));

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 3.0);
  Tensor logits({5, 20});
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = static_cast<Real>(g(rng));
  const std::vector<int> ys = {2, 9, 11, 20, 1};
  double oracle = 0;
  for (int r = 0; r < 5; ++r) {
    double z = 0;
    for (int c = 0; c < 20; ++c) z += std::exp(double(logits[r * 20 + c]));
    oracle += std::log(z) - logits[r * 20 + ys[r] - 1];
  }
  Tensor grad;
  CHECK(cross_entropy_loss(logits, ys, &grad) == doctest::Approx(oracle / 5).epsilon(1e-9));
  for (int r = 0; r < 5; ++r) {
    double row = 0;
    for (int c = 0; c < 20; ++c) row += grad[r * 20 + c];
    CHECK(std::abs(row) < 1e-6);
  }
  const std::vector<int> bad = {0};
  CHECK_THROWS_AS(cross_entropy_loss(confident, bad), ValidationError);
}

TEST_CASE("set_trainable selects the tune-mode tensors") {
  const auto cls = init_params(toy(), HeadKind::classification, 1);
  auto names = [&](TuneMode mode) {
    std::vector<std::string> out;
    const auto mask = set_trainable(cls, mode);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(cls.tensors[i].name);
    return out;
  };
  CHECK(names(TuneMode::probe1) == std::vector<std::string>{"head.fc2.weight", "head.fc2.bias"});
  CHECK(names(TuneMode::probe2) ==
        std::vector<std::string>{"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"});
  const auto full = set_trainable(cls, TuneMode::full);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(full[i] == !cls.tensors[i].buffer);
  const auto reg = init_params(toy(), HeadKind::regression, 1);
  CHECK_THROWS_AS(set_trainable(reg, TuneMode::probe1), ContractError);
  CHECK_NOTHROW(set_trainable(reg, TuneMode::full));
}

TEST_CASE("training config serialisation is strict") {
  TrainConfig c = classification_config(TuneMode::probe2, 3, 9);
  c.use_demographics = false;
  CHECK(train_config_from_json(train_config_to_json(c)) == c);
  CHECK_THROWS_AS(train_config_from_json(R"({"epochs": 2, "learnig_rate": 0.1})"), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(R"({"model": {"embed": 3}})"), ValidationError);
  CHECK_THROWS_AS(train_config_from_json("{"), ValidationError);
  const TrainConfig d = train_config_from_json("{}");
  CHECK(d.learning_rate == 1e-4);
  CHECK(d.effective_batch_size() == kDefaultRegressionBatch);
  TrainConfig k;
  k.task = HeadKind::classification;
  CHECK(k.effective_batch_size() == kDefaultClassificationBatch);
}

TEST_CASE("checkpoint round trip is exact and loading is strict") {
  testing::TempDir dir;
  Checkpoint c;
  c.config = classification_config(TuneMode::full, 2, 4);
  c.params = init_params(toy(), HeadKind::classification, 4);
  c.params.norm_stats.mean = {41.5, 0.5, 1712.25, 70.125};
  c.epoch = 2;
  c.train_loss_history = {2.9, 2.5};
  save_checkpoint(c, dir / "ck.bin");
  const Checkpoint back = load_checkpoint(dir / "ck.bin");
  CHECK(back.params.hash() == c.params.hash());
  CHECK(back.params.norm_stats == c.params.norm_stats);
  CHECK(back.config == c.config);
  CHECK(back.epoch == 2);
  CHECK(back.train_loss_history == c.train_loss_history);

  auto bytes = serialize_checkpoint(c);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), ValidationError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(magic), ValidationError);
  CHECK_THROWS(load_checkpoint(dir / "missing.bin"));
}

TEST_CASE("pretraining lowers the loss and is reproducible") {
  testing::TempDir dir;
  const DatasetManifest m =
      split_by_case(build_regression_dataset(cohort(4), 20, dir / "reg", kDetector), 1, 1);
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochStats& s) { losses.push_back(s.train_loss); };
  const Checkpoint a = pretrain_regression(regression_config(4, 5), m, dir / "run", hooks);
  REQUIRE(losses.size() == 4);
  CHECK(losses.back() < losses.front());
  CHECK(std::filesystem::exists(dir / "run" / kCheckpointFile));
  CHECK(load_checkpoint(dir / "run" / kCheckpointFile).params.hash() == a.params.hash());
  CHECK(a.config.learning_rate == 3e-3);
  CHECK(a.params.norm_stats == compute_norm_stats(m));

  const Checkpoint b = pretrain_regression(regression_config(4, 5), m, {});
  CHECK(b.params.hash() == a.params.hash());
  const Checkpoint c = pretrain_regression(regression_config(4, 6), m, {});
  CHECK(c.params.hash() != a.params.hash());

  TrainConfig wrong = regression_config(1, 1);
  wrong.model.input_resolution = 32;
  CHECK_THROWS_AS(pretrain_regression(wrong, m, {}), ValidationError);
}

TEST_CASE("probing never moves frozen tensors") {
  testing::TempDir dir;
  const auto phantoms = cohort(3);
  const DatasetManifest reg = build_regression_dataset(phantoms, 30, dir / "reg", kDetector);
  const Checkpoint pretext = pretrain_regression(regression_config(1, 2), reg, {});
  const DatasetManifest cls = build_classification_dataset(phantoms, 5, 1, 3, dir / "cls", kDetector);

  for (TuneMode mode : {TuneMode::probe1, TuneMode::probe2}) {
    TrainConfig c = classification_config(mode, 2, 7);
    c.init = InitKind::pretext;
    std::vector<bool> mask;
    std::vector<Tensor> before;
    TrainHooks hooks;
    hooks.on_start = [&](const ModelParams& p) {
      mask = set_trainable(p, mode);
      for (const auto& t : p.tensors) before.push_back(t.value);
    };
    const Checkpoint out = finetune_classification(c, pretext, cls, {}, hooks);
    CHECK(out.params.trunk_hash() == pretext.params.trunk_hash());
    bool moved = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (!mask[i]) CHECK(out.params.tensors[i].value == before[i]);
      else moved |= !(out.params.tensors[i].value == before[i]);
    }
    CHECK(moved);
    CHECK(out.config.model == pretext.params.config);
  }
  TrainConfig missing = classification_config(TuneMode::full, 1, 1);
  missing.init = InitKind::pretext;
  CHECK_THROWS_AS(finetune_classification(missing, std::nullopt, cls, {}), ValidationError);
}

TEST_CASE("full fine-tuning fits the train split better than a one-layer probe") {
  testing::TempDir dir;
  const auto phantoms = cohort(3);
  const DatasetManifest reg = build_regression_dataset(phantoms, 30, dir / "reg", kDetector);
  const DatasetManifest cls = build_classification_dataset(phantoms, 5, 2, 3, dir / "cls", kDetector);
  auto final_loss = [&](TuneMode mode, std::uint64_t seed) {
    const Checkpoint pretext = pretrain_regression(regression_config(1, seed), reg, {});
    TrainConfig c = classification_config(mode, 6, seed);
    c.init = InitKind::pretext;
    return finetune_classification(c, pretext, cls, {}).train_loss_history.back();
  };
  std::vector<double> full, probe;
  for (std::uint64_t s : {1, 2, 3}) {
    full.push_back(final_loss(TuneMode::full, s));
    probe.push_back(final_loss(TuneMode::probe1, s));
  }
  std::sort(full.begin(), full.end());
  std::sort(probe.begin(), probe.end());
  CHECK(full[1] < probe[1]);
}

TEST_CASE("disabling demographics makes them irrelevant") {
  testing::TempDir dir;
  const auto phantoms = cohort(3);
  const DatasetManifest cls = build_classification_dataset(phantoms, 5, 1, 3, dir / "cls", kDetector);
  TrainConfig c = classification_config(TuneMode::full, 1, 3);
  c.use_demographics = false;
  const Checkpoint ck = finetune_classification(c, std::nullopt, cls, {});
  CHECK_FALSE(ck.config.use_demographics);
  const auto recs = all_records(cls);
  Batch b = load_batch(cls, recs);
  Batch shuffled = b;
  for (std::int64_t i = 0; i < shuffled.demographics.numel(); ++i) shuffled.demographics[i] *= 1.37f;
  CHECK(predict(ck.params, b.images, b.demographics, false) ==
        predict(ck.params, shuffled.images, shuffled.demographics, false));
  CHECK_FALSE(predict(ck.params, b.images, b.demographics, true) ==
              predict(ck.params, shuffled.images, shuffled.demographics, true));
}

TEST_CASE("norm stats are population z-scores of train cases") {
  testing::TempDir dir;
  const DatasetManifest m = build_regression_dataset(cohort(3), 60, dir / "reg", kDetector);
  const NormStats s = compute_norm_stats(m);
  CHECK(s.mean[0] == doctest::Approx(35.0));
  CHECK(s.stddev[0] == doctest::Approx(std::sqrt(50.0 / 3.0)));
  CHECK(s.mean[2] == doctest::Approx(1620.0));
}
