#include <stdlib.h>

#include <fstream>
#include <sstream>

#include "carm/app.hpp"
#include "carm/dataset.hpp"
#include "carm/training.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace carm;
using json = nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = app::run_command(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

// Sets an environment variable for the scope.
struct EnvGuard {
  std::string name;
  EnvGuard(std::string n, const std::string& value) : name(std::move(n)) { ::setenv(name.c_str(), value.c_str(), 1); }
  ~EnvGuard() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == app::kExitUsage);
  CHECK(run({"frobnicate"}).code == app::kExitUsage);
  const Outcome bad = run({"phantom-gen", "--out", "x", "--colour", "red"});
  CHECK(bad.code == app::kExitUsage);
  CHECK(bad.err.find("--colour") != std::string::npos);
  CHECK(run({"phantom-gen", "--cases", "many"}).code == app::kExitUsage);
  CHECK(run({"--help"}).code == app::kExitOk);
}

TEST_CASE("pretext fine-tuning without a checkpoint is a usage error") {
  testing::TempDir dir;
  const Outcome o = run({"finetune", "--init", "pretext", "--dataset", (dir / "ds").string(), "--out",
                         (dir / "o").string()});
  CHECK(o.code == app::kExitUsage);
  CHECK(o.err.find("--checkpoint") != std::string::npos);
}

TEST_CASE("missing inputs exit with code 1") {
  testing::TempDir dir;
  const Outcome o = run({"dataset-build", "--phantoms", (dir / "none").string(), "--out", (dir / "ds").string()});
  CHECK(o.code == app::kExitFailure);
  CHECK(o.err.find("input not found") != std::string::npos);
  CHECK(run({"evaluate", "--checkpoint", (dir / "c.bin").string(), "--dataset", (dir / "d").string(), "--out",
             (dir / "r").string()})
            .code == app::kExitFailure);
}

TEST_CASE("phantom-gen writes the cohort and a config echo") {
  testing::TempDir dir;
  const Outcome o = run({"phantom-gen", "--out", (dir / "ph").string(), "--cases", "2", "--seed", "5",
                         "--voxel-mm", "6"});
  REQUIRE(o.code == app::kExitOk);
  CHECK(load_phantom(dir / "ph" / "case-000").arm_pose() == ArmPose::arms_raised);
  CHECK(load_phantom(dir / "ph" / "case-001").arm_pose() == ArmPose::arms_crossed);
  const json echo = read_json(dir / "ph" / app::kConfigEchoFile);
  CHECK(echo["command"] == "phantom-gen");
  CHECK(echo["config"]["cases"] == 2);
  CHECK(echo["config"]["voxel_mm"] == 6.0);
  CHECK(echo["config"]["seed"] == 5);
}

TEST_CASE("config files are strict and flags override them") {
  testing::TempDir dir;
  {
    std::ofstream(dir / "good.json") << R"({"cases": 3, "voxel_mm": 8.0, "seed": 2})";
    std::ofstream(dir / "typo.json") << R"({"casess": 3})";
    std::ofstream(dir / "type.json") << R"({"cases": "three"})";
  }
  const Outcome ok = run({"phantom-gen", "--config", (dir / "good.json").string(), "--cases", "1", "--out",
                          (dir / "ph").string()});
  REQUIRE(ok.code == app::kExitOk);
  const json echo = read_json(dir / "ph" / app::kConfigEchoFile);
  CHECK(echo["config"]["cases"] == 1);
  CHECK(echo["config"]["voxel_mm"] == 8.0);
  CHECK(echo["config"]["seed"] == 2);
  const Outcome typo = run({"phantom-gen", "--config", (dir / "typo.json").string(), "--out", (dir / "x").string()});
  CHECK(typo.code == app::kExitUsage);
  CHECK(typo.err.find("casess") != std::string::npos);
  CHECK(run({"phantom-gen", "--config", (dir / "type.json").string(), "--out", (dir / "y").string()}).code ==
        app::kExitUsage);
}

TEST_CASE("relative paths resolve against the data root") {
  testing::TempDir dir;
  {
    EnvGuard env(app::kDataRootVariable, dir.path().string());
    REQUIRE(run({"phantom-gen", "--out", "env", "--cases", "1", "--voxel-mm", "8"}).code == app::kExitOk);
  }
  CHECK(std::filesystem::exists(dir / "env" / "case-000" / "header.json"));
  REQUIRE(run({"--data-root", dir.path().string(), "phantom-gen", "--out", "flag", "--cases", "1", "--voxel-mm", "8"})
              .code == app::kExitOk);
  CHECK(std::filesystem::exists(dir / "flag" / "case-000" / "header.json"));
}

TEST_CASE("dataset-build grids a 600 x 1800 mm phantom into 1281 records") {
  testing::TempDir dir;
  export_phantom(testing::box_phantom("case-000", 50, 150, 4, 12.0), dir / "ph" / "case-000");
  const Outcome o = run({"dataset-build", "--phantoms", (dir / "ph").string(), "--out", (dir / "ds").string(),
                         "--resolution", "8", "--detector-mm", "64", "--test-cases", "0"});
  REQUIRE(o.code == app::kExitOk);
  const DatasetManifest m = read_manifest(dir / "ds");
  CHECK(m.records.size() == 1281);
  CHECK(m.detector.resolution == 8);
  CHECK(o.out.find("1281 records") != std::string::npos);
}

TEST_CASE("end-to-end: dataset, pretrain, fine-tune, evaluate, ablate") {
  testing::TempDir dir;
  for (int i = 0; i < 3; ++i) {
    Demographics d;
    d.height_mm = 1600 + 50 * i;
    const std::string id = "case-00" + std::to_string(i);
    export_phantom(testing::box_phantom(id, 20, 40, 10, 3.0, d), dir / "ph" / id);
  }
  const std::vector<std::string> small_model = {"--base-width", "4", "--blocks", "1,1,1,1", "--embed-dim", "8",
                                                "--ffn-dim", "16", "--head-hidden", "8", "--batch-size", "16"};
  auto with_model = [&](std::vector<std::string> args) {
    args.insert(args.end(), small_model.begin(), small_model.end());
    return run(args);
  };
  const std::string ph = (dir / "ph").string();
  REQUIRE(run({"dataset-build", "--phantoms", ph, "--out", (dir / "reg").string(), "--resolution", "16",
               "--detector-mm", "48", "--test-cases", "1", "--spacing-mm", "20"})
              .code == app::kExitOk);
  REQUIRE(run({"dataset-build", "--phantoms", ph, "--out", (dir / "cls").string(), "--task", "classification",
               "--resolution", "16", "--detector-mm", "48", "--test-cases", "1", "--samples-per-landmark", "1"})
              .code == app::kExitOk);
  const Outcome pre = with_model({"pretrain", "--dataset", (dir / "reg").string(), "--out", (dir / "pre").string(),
                                  "--epochs", "1", "--no-augment"});
  REQUIRE(pre.code == app::kExitOk);
  CHECK(pre.out.find("test mean positional error") != std::string::npos);
  const Checkpoint ck = load_checkpoint(dir / "pre" / kCheckpointFile);
  CHECK(ck.config.learning_rate == 1e-4);
  CHECK_FALSE(ck.config.augment);
  CHECK(ck.params.config.base_width == 4);

  const Outcome wrong_task = run({"finetune", "--dataset", (dir / "reg").string(), "--out", (dir / "ft").string()});
  CHECK(wrong_task.code == app::kExitFailure);

  const Outcome ft = run({"finetune", "--init", "pretext", "--checkpoint", (dir / "pre" / kCheckpointFile).string(),
                          "--dataset", (dir / "cls").string(), "--out", (dir / "ft").string(), "--epochs", "1",
                          "--mode", "probe1", "--batch-size", "16"});
  REQUIRE(ft.code == app::kExitOk);
  CHECK(load_checkpoint(dir / "ft" / kCheckpointFile).params.trunk_hash() == ck.params.trunk_hash());

  const Outcome ev = run({"evaluate", "--checkpoint", (dir / "ft" / kCheckpointFile).string(), "--dataset",
                          (dir / "cls").string(), "--out", (dir / "ev").string(), "--name", "probe"});
  REQUIRE(ev.code == app::kExitOk);
  CHECK(std::filesystem::exists(dir / "ev" / "report.jsonl"));
  CHECK(ev.out.find("probe") != std::string::npos);

  const Outcome ab = run({"ablate", "--checkpoint", (dir / "pre" / kCheckpointFile).string(), "--dataset",
                          (dir / "cls").string(), "--out", (dir / "ab").string(), "--epochs", "1", "--seeds", "4",
                          "--batch-size", "32"});
  REQUIRE(ab.code == app::kExitOk);
  CHECK(ab.out.find("median F1 pretext-full-nodemo") != std::string::npos);
  for (const auto& cell : app::ablation_grid())
    CHECK(std::filesystem::exists(dir / "ab" / (cell.label() + "-s4") / kCheckpointFile));
}

TEST_CASE("ablation keeps frozen tensors fixed") {
  testing::TempDir dir;
  std::vector<Phantom> phantoms;
  for (int i = 0; i < 2; ++i) phantoms.push_back(testing::box_phantom("case-" + std::to_string(i), 20, 40, 10, 3.0));
  const DetectorSpec det{48, 16};
  const DatasetManifest reg = build_regression_dataset(phantoms, 30, dir / "reg", det);
  const DatasetManifest cls = split_by_case(build_classification_dataset(phantoms, 5, 1, 1, dir / "cls", det), 1, 1);
  TrainConfig t;
  t.model.input_resolution = 16;
  t.model.base_width = 4;
  t.model.blocks = {1, 1, 1, 1};
  t.model.embed_dim = 8;
  t.model.ffn_dim = 16;
  t.model.head_hidden = 8;
  t.batch_size = 16;
  t.augment = false;
  save_checkpoint(pretrain_regression(t, reg, {}), dir / "pre.bin");

  app::AblationSettings s;
  s.pretext_checkpoint = dir / "pre.bin";
  s.seeds = {1};
  s.base = t;
  s.base.epochs = 1;
  const app::AblationResult r = app::run_ablation(s, cls, dir / "ab", nullptr);
  REQUIRE(r.runs.size() == 6);
  for (const auto& run : r.runs) {
    if (run.cell.mode == TuneMode::full) continue;  // running statistics update in full mode
    CHECK(run.frozen_hash_before == run.frozen_hash_after);
    int trainable = 0;
    for (bool b : run.trainable) trainable += b;
    CHECK(trainable == (run.cell.mode == TuneMode::probe1 ? 2 : 4));
  }
  CHECK(r.median_f1(app::ablation_grid()[0]) == r.runs[0].report.metric("micro_f1"));
}
