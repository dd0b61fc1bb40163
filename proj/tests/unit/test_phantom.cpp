#include <cmath>
#include <random>

#include "carm/error.hpp"
#include "carm/phantom.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace carm;

namespace {

// Midpoint-rule quadrature of mu along the ray, clipped to the grid box.
double quadrature_oracle(const VoxelGrid& grid, const Ray& ray, int samples) {
  const Vec3 e = grid.extent();
  double t0 = -1e300, t1 = 1e300;
  const double o[3] = {ray.origin.x, ray.origin.y, ray.origin.z};
  const double d[3] = {ray.direction.x, ray.direction.y, ray.direction.z};
  const double hi[3] = {e.x, e.y, e.z};
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < 0.0 || o[a] > hi[a]) return 0.0;
      continue;
    }
    double ta = (0.0 - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t1 > t0)) return 0.0;
  const double h = (t1 - t0) / samples;
  double sum = 0.0;
  for (int s = 0; s < samples; ++s) {
    const double t = t0 + (s + 0.5) * h;
    sum += grid.mu_at(ray.origin + t * ray.direction);
  }
  return sum * h * norm(ray.direction);
}

Demographics demo(double height, double weight = 60.0, int sex = 1, double age = 40.0) {
  Demographics d;
  d.age_years = age;
  d.sex = sex;
  d.height_mm = height;
  d.weight_kg = weight;
  return d;
}

}  // namespace

TEST_CASE("landmark table follows the annotation order") {
  CHECK(landmark_name(1) == "skull");
  CHECK(landmark_name(14) == "T12");
  CHECK(landmark_name(10) == "T1");
  CHECK(landmark_id("T12") == 14);
  for (int id = 1; id <= kLandmarkCount; ++id) CHECK(landmark_id(landmark_name(id)) == id);
  CHECK_THROWS_AS(landmark_name(0), ValidationError);
  CHECK_THROWS_AS(landmark_name(21), ValidationError);
  CHECK_THROWS_AS(landmark_id("tibia"), ValidationError);
}

TEST_CASE("demographics validation names the field") {
  Demographics d = demo(1700);
  d.height_mm = 2100;
  try {
    d.validate();
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("height_mm") != std::string::npos);
  }
  d = demo(1700);
  d.sex = 2;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  CHECK_THROWS_AS(build_phantom(1, d, ArmPose::arms_raised), ValidationError);
}

TEST_CASE("build_phantom is deterministic") {
  const Phantom a = build_phantom(7, demo(1650), ArmPose::arms_raised);
  const Phantom b = build_phantom(7, demo(1650), ArmPose::arms_raised);
  CHECK(a.volume().hash() == b.volume().hash());
  CHECK(format_landmark_table(a.landmarks()) == format_landmark_table(b.landmarks()));
  const Phantom c = build_phantom(8, demo(1650), ArmPose::arms_raised);
  CHECK(a.volume().hash() != c.volume().hash());
}

TEST_CASE("landmarks are complete, ordered and inside the volume") {
  for (auto pose : {ArmPose::arms_raised, ArmPose::arms_crossed}) {
    const Phantom p = build_phantom(3, demo(1720, 80, 0), pose);
    const auto lms = landmark_positions(p);
    REQUIRE(lms.size() == 20);
    for (int i = 0; i < 20; ++i) {
      CHECK(lms[i].id == i + 1);
      CHECK(p.volume().contains(lms[i].position));
    }
    CHECK(lms[0].position.y < lms[9].position.y);  // skull above T1
    for (float mu : p.volume().mu) REQUIRE(mu >= 0.0f);
  }
}

TEST_CASE("taller phantom has a longer skull to pubic symphysis distance") {
  const Phantom tall = build_phantom(7, demo(1800), ArmPose::arms_raised);
  const Phantom short_ = build_phantom(7, demo(1500), ArmPose::arms_raised);
  auto span = [](const Phantom& p) {
    const auto lms = landmark_positions(p);
    return norm(lms[landmark_id("pubic symphysis") - 1].position - lms[0].position);
  };
  CHECK(span(tall) > span(short_));
}

TEST_CASE("femoral heads are mirror-symmetric about the midline over 20 seeds") {
  std::mt19937_64 rng(99);
  double mid_offset = 0.0, dy = 0.0, dz = 0.0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    std::uniform_real_distribution<double> h(1500, 1900), w(50, 110);
    const Phantom p = build_phantom(static_cast<std::uint64_t>(s), demo(h(rng), w(rng), s % 2),
                                    s % 3 == 0 ? ArmPose::arms_crossed : ArmPose::arms_raised);
    const auto lms = landmark_positions(p);
    const Vec3 r = lms[18].position, l = lms[19].position;
    mid_offset += (r.x + l.x) / 2 - p.extent().x / 2;
    dy += r.y - l.y;
    dz += r.z - l.z;
  }
  CHECK(std::abs(mid_offset / seeds) < 5.0);
  CHECK(std::abs(dy / seeds) < 5.0);
  CHECK(std::abs(dz / seeds) < 5.0);
}

TEST_CASE("arm pose moves wrists medially when crossed") {
  const Phantom raised = build_phantom(5, demo(1700), ArmPose::arms_raised);
  const Phantom crossed = build_phantom(5, demo(1700), ArmPose::arms_crossed);
  auto wrist_offset = [](const Phantom& p) {
    return std::abs(p.landmarks()[landmark_id("right wrist") - 1].position.x - p.extent().x / 2);
  };
  CHECK(wrist_offset(crossed) < wrist_offset(raised));
  CHECK(raised.landmarks()[landmark_id("right wrist") - 1].position.y <
        raised.landmarks()[landmark_id("skull") - 1].position.y + 100.0);
}

TEST_CASE("line integral closed forms") {
  VoxelGrid one(1, 1, 1, 2.0, 0.01f);
  CHECK(line_integral(one, {{1.0, 1.0, -5.0}, {0, 0, 1}}) == doctest::Approx(2.0 * double(0.01f)).epsilon(1e-12));
  CHECK(line_integral(one, {{10.0, 1.0, -5.0}, {0, 0, 1}}) == 0.0);
  CHECK(line_integral(one, {{-3.0, -3.0, -3.0}, {-1, 0, 0}}) == 0.0);
  CHECK_THROWS_AS(line_integral(one, {{0, 0, 0}, {0, 0, 0}}), ValidationError);
}

TEST_CASE("oblique ray through a checkerboard matches quadrature") {
  VoxelGrid grid(2, 2, 2, 1.0);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) grid.at(i, j, k) = (i + j + k) % 2 ? 0.03f : 0.01f;
  // Crossings at t = 1/4, 1/2, 3/4 of the chord land on sample cell edges.
  const Ray ray{{0.0, 0.75, 0.5}, {2.0, 1.0, 2.0 / 3.0}};
  const double exact = line_integral(grid, ray);
  const double oracle = quadrature_oracle(grid, ray, 10000);
  CHECK(std::abs(exact - oracle) <= 1e-6 * oracle);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Ray r{{1.0 + 0.9 * u(rng), 1.0 + 0.9 * u(rng), -3.0}, {0.7 * u(rng), 0.7 * u(rng), 1.0}};
    const double a = line_integral(grid, r);
    const double q = quadrature_oracle(grid, r, 200000);
    CHECK(std::abs(a - q) <= 1e-4 * q + 1e-12);
  }
}

TEST_CASE("phantom export round-trips exactly") {
  testing::TempDir dir;
  const Phantom p = build_phantom(11, demo(1600, 55, 1, 70), ArmPose::arms_crossed);
  export_phantom(p, dir / "case");
  const Phantom q = load_phantom(dir / "case");
  CHECK(q.case_id() == p.case_id());
  CHECK(q.demographics() == p.demographics());
  CHECK(q.arm_pose() == p.arm_pose());
  CHECK(q.table_z() == p.table_z());
  CHECK(q.volume().hash() == p.volume().hash());
  CHECK(format_landmark_table(q.landmarks()) == format_landmark_table(p.landmarks()));
  CHECK_THROWS(load_phantom(dir / "missing"));
}

TEST_CASE("landmark table text is parsed strictly") {
  const Phantom p = testing::box_phantom("box", 20, 40, 10, 3.0);
  const std::string text = format_landmark_table(p.landmarks());
  const auto back = parse_landmark_table(text);
  REQUIRE(back.size() == 20);
  for (int i = 0; i < 20; ++i) CHECK(back[i].position == p.landmarks()[i].position);
  CHECK_THROWS_AS(parse_landmark_table("1\tskull\t1.0\t2.0\n"), ValidationError);
}

TEST_CASE("cohort sampling is seeded and alternates arm poses") {
  const auto a = sample_cohort(6, 3);
  const auto b = sample_cohort(6, 3);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].case_id == b[i].case_id);
    CHECK(a[i].demographics == b[i].demographics);
    CHECK(a[i].arm_pose == (i % 2 == 0 ? ArmPose::arms_raised : ArmPose::arms_crossed));
    a[i].demographics.validate();
  }
  CHECK(a[0].case_id == "case-000");
  CHECK_FALSE(sample_cohort(6, 4)[0].demographics == a[0].demographics);
}

TEST_CASE("table depth stays within 50 mm of the volume centre") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Phantom p = build_phantom(s, demo(1700, 40 + 20.0 * s), ArmPose::arms_raised);
    CHECK(std::abs(p.table_z() - p.extent().z / 2) <= 50.0);
  }
}
