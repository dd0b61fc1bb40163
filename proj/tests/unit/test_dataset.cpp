#include <cmath>
#include <map>
#include <random>
#include <set>

#include "carm/dataset.hpp"
#include "carm/error.hpp"
#include "carm/image_io.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace carm;

namespace {

DatasetManifest synthetic_manifest(int cases, int records_per_case) {
  DatasetManifest m;
  for (int c = 0; c < cases; ++c) {
    CaseInfo info;
    char id[32];
    std::snprintf(id, sizeof id, "case-%03d", c);
    info.case_id = id;
    info.extent = {500, 1000, 300};
    m.cases.push_back(info);
    for (int r = 0; r < records_per_case; ++r) {
      ManifestRecord rec;
      rec.case_id = id;
      rec.image_path = "images/" + info.case_id + "/" + std::to_string(r) + ".png";
      rec.pose_mm = {10.0 * r, 20.0, 150.0};
      rec.pose_raw = normalize_pose(rec.pose_mm, info.extent, {}).raw;
      m.records.push_back(rec);
    }
  }
  return m;
}

}  // namespace

TEST_CASE("grid arithmetic") {
  CHECK(grid_count(60, 30) * grid_count(60, 30) == 9);
  CHECK(grid_count(600, 30) == 21);
  CHECK(grid_count(1800, 30) == 61);
  CHECK(grid_count(600, 30) * grid_count(1800, 30) == 1281);
  CHECK(grid_count(20, 30) == 1);
  CHECK_THROWS_AS(grid_count(60, 0), ValidationError);
  CHECK_THROWS_AS(grid_count(60, -3), ValidationError);
}

TEST_CASE("grid poses cover the extent at the table depth") {
  const Phantom p = testing::box_phantom("g", 20, 20, 10, 3.0);  // 60 x 60 mm
  const auto poses = make_grid_poses(p, 30);
  REQUIRE(poses.size() == 9);
  CHECK(poses.front() == CarmPose{0, 0, p.table_z()});
  CHECK(poses.back() == CarmPose{60, 60, p.table_z()});
  CHECK(poses[1] == CarmPose{30, 0, p.table_z()});  // row-major, y outer
  for (const auto& q : poses) CHECK(q.z == p.table_z());
  const auto single = make_grid_poses(p, 100);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == CarmPose{30, 30, p.table_z()});
}

TEST_CASE("every landmark lies within one spacing of a grid pose") {
  const Phantom p = build_phantom(9, Demographics{}, ArmPose::arms_crossed);
  const auto poses = make_grid_poses(p, 30);
  for (const auto& lm : p.landmarks()) {
    double best = 1e300;
    for (const auto& q : poses) best = std::min(best, std::hypot(q.x - lm.position.x, q.y - lm.position.y));
    CHECK(best <= 30.0);
  }
}

TEST_CASE("normalisation round trip and clamping") {
  const Vec3 e{500, 1200, 300}, o{0, 0, 0};
  CHECK(normalize_pose({0, 0, 0}, e, o).raw == Vec3{0, 0, 0});
  CHECK(normalize_pose({500, 1200, 300}, e, o).raw == Vec3{1, 1, 1});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const CarmPose p{u(rng) * e.x, u(rng) * e.y, u(rng) * e.z};
    const auto n = normalize_pose(p, e, o);
    CHECK_FALSE(n.clamped);
    const CarmPose back = denormalize_pose(n.raw, e, o);
    CHECK(std::abs(back.x - p.x) < 1e-9);
    CHECK(std::abs(back.y - p.y) < 1e-9);
    CHECK(std::abs(back.z - p.z) < 1e-9);
  }
  const auto c = normalize_pose({-10, 600, 400}, e, o);
  CHECK(c.clamped);
  CHECK(c.raw == Vec3{0, 0.5, 1});
  CHECK_THROWS_AS(normalize_pose({0, 0, 0}, {0, 1, 1}, o), ValidationError);
}

TEST_CASE("regression dataset counts, naming and re-render spot check") {
  testing::TempDir dir;
  std::vector<Phantom> phantoms = {testing::box_phantom("b", 20, 20, 10, 3.0),
                                   testing::box_phantom("a", 20, 20, 10, 3.0)};
  const DetectorSpec det{48, 16};
  const DatasetManifest m = build_regression_dataset(phantoms, 30, dir / "reg", det);
  REQUIRE(m.records.size() == 18);
  CHECK(m.records.front().case_id == "a");  // sorted by case id
  CHECK(m.records.front().image_path == "images/a/r000_c000.png");
  CHECK(m.records[5].image_path == "images/a/r001_c002.png");
  m.validate();
  for (const auto& r : m.records) {
    CHECK_FALSE(r.label.has_value());
    const DrrImage stored = read_png16(m.image_file(r), det.detector_mm);
    const Phantom& p = r.case_id == "a" ? phantoms[1] : phantoms[0];
    CHECK(stored.hash() == quantize16(render_drr(p, r.pose_mm, det.detector_mm, det.resolution)).hash());
  }
  const DatasetManifest again = build_regression_dataset(phantoms, 30, dir / "reg2", det);
  CHECK(again.content_hash() == m.content_hash());
  const DatasetManifest loaded = read_manifest(dir / "reg");
  CHECK(loaded.content_hash() == m.content_hash());
  CHECK(loaded.records == m.records);
}

TEST_CASE("classification dataset labels, jitter and uniform histogram") {
  testing::TempDir dir;
  const DetectorSpec det{64, 16};
  const Phantom p = build_phantom(3, Demographics{}, ArmPose::arms_raised);
  const DatasetManifest two = build_classification_dataset({p}, 10, 2, 1, dir / "two", det);
  REQUIRE(two.records.size() == 40);
  for (const auto& r : two.records) {
    REQUIRE(r.label.has_value());
    const Vec3 lm = p.landmarks()[*r.label - 1].position;
    CHECK(std::abs(r.pose_mm.x - lm.x) <= 10.0);
    CHECK(std::abs(r.pose_mm.y - lm.y) <= 10.0);
    CHECK(r.pose_mm.z == p.table_z());
  }
  const DatasetManifest exact = build_classification_dataset({p}, 0, 1, 1, dir / "exact", det);
  for (const auto& r : exact.records) {
    const Vec3 lm = p.landmarks()[*r.label - 1].position;
    CHECK(r.pose_mm.x == lm.x);
    CHECK(r.pose_mm.y == lm.y);
  }
  const DatasetManifest same = build_classification_dataset({p}, 10, 2, 1, dir / "same", det);
  CHECK(same.content_hash() == two.content_hash());
  const DatasetManifest other = build_classification_dataset({p}, 10, 2, 2, dir / "other", det);
  CHECK(other.content_hash() != two.content_hash());

  std::vector<Phantom> cohort;
  for (int i = 0; i < 10; ++i) cohort.push_back(testing::box_phantom("c" + std::to_string(i), 20, 40, 10, 3.0));
  const DatasetManifest many = build_classification_dataset(cohort, 5, 3, 7, dir / "many", {48, 8});
  std::map<int, int> hist;
  for (const auto& r : many.records) ++hist[*r.label];
  REQUIRE(hist.size() == 20);
  for (const auto& [id, n] : hist) CHECK(n == 30);
}

TEST_CASE("split_by_case keeps cases whole") {
  const DatasetManifest m = synthetic_manifest(270, 2);
  const DatasetManifest s = split_by_case(m, 54, 3);
  CHECK(s.case_ids(Split::train).size() == 216);
  CHECK(s.case_ids(Split::test).size() == 54);
  s.validate();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DatasetManifest t = split_by_case(m, 54, seed);
    const auto train = t.case_ids(Split::train), test = t.case_ids(Split::test);
    std::set<std::string> a(train.begin(), train.end());
    for (const auto& id : test) CHECK(a.count(id) == 0);
  }
  CHECK(split_by_case(m, 54, 3).content_hash() == s.content_hash());
  CHECK(split_by_case(m, 54, 4).content_hash() != s.content_hash());
  const DatasetManifest none = split_by_case(m, 0, 1);
  CHECK(none.select(Split::test).empty());
  CHECK(none.select(Split::train).size() == m.records.size());
  CHECK_THROWS_AS(split_by_case(m, 270, 1), ValidationError);
}

TEST_CASE("manifest parsing is strict") {
  DatasetManifest m = synthetic_manifest(2, 2);
  const std::string text = format_manifest(m);
  CHECK(parse_manifest(text).content_hash() == m.content_hash());
  std::string extra = text;
  extra.insert(extra.find("\"case_id\":\"case-000\",\"arm_pose\""), "\"bogus\":1,");
  CHECK_THROWS_AS(parse_manifest(extra), ValidationError);
  DatasetManifest both = m;
  both.records[0].split = Split::test;
  CHECK_THROWS_AS(both.validate(), ValidationError);
  DatasetManifest bad_raw = m;
  bad_raw.records[0].pose_raw.x += 0.1;
  CHECK_THROWS_AS(bad_raw.validate(), ValidationError);
  DatasetManifest labelled = m;
  labelled.records[0].label = 3;
  CHECK_THROWS_AS(labelled.validate(), ValidationError);
}

TEST_CASE("annotation export round trip") {
  std::vector<AnnotationRow> rows = {{"case-001", 14, "T12", {123.456789012, 456.25, 150.125}, "anonymous"},
                                     {"case-001", 1, "skull", {1.0 / 3.0, 2.0 / 3.0, 99.0}, "r1"}};
  const std::string text = format_annotation_export(rows);
  CHECK(text.rfind("# case_id\tlandmark_id\tlandmark_name\tx\ty\tz\tannotator_id\n", 0) == 0);
  CHECK(parse_annotation_export(text) == rows);
  CHECK(parse_annotation_export(format_annotation_export({})).empty());
  CHECK_THROWS_AS(parse_annotation_export("case\t21\tx\t1\t2\t3\tanon\n"), ValidationError);
}

TEST_CASE("augmentation examples") {
  DrrImage img(8, 10, 0.53f);
  AugmentationConfig cfg;
  cfg.jitter_strength = 0;
  cfg.posterize_levels = 4;
  for (float v : augment(img, cfg).pixels) CHECK(v == 0.5f);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& p : img.pixels) p = u(rng);
  cfg.posterize_levels = std::int64_t(1) << 32;
  CHECK(augment(img, cfg).pixels == img.pixels);

  cfg = AugmentationConfig{};
  cfg.seed = 42;
  const DrrImage a = augment(img, cfg), b = augment(img, cfg);
  CHECK(a.pixels == b.pixels);
  for (float v : a.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  cfg.seed = 43;
  CHECK(augment(img, cfg).pixels != a.pixels);
  cfg.posterize_levels = 1;
  CHECK_THROWS_AS(augment(img, cfg), ValidationError);
}
