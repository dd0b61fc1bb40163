#include <cmath>
#include <random>

#include "carm/drr.hpp"
#include "carm/error.hpp"
#include "carm/image_io.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace carm;

TEST_CASE("zero attenuation renders all ones") {
  Phantom p = testing::box_phantom("air", 20, 20, 10, 3.0);
  p = p.with_volume(VoxelGrid(20, 20, 10, 3.0, 0.0f));
  const DrrImage img = render_drr(p, {30, 30, 15}, 60, 16);
  for (float v : img.pixels) CHECK(v == 1.0f);
}

TEST_CASE("uniform slab gives the Beer-Lambert value") {
  // 100 mm deep slab, mu = 0.02 / mm.
  Phantom p = testing::box_phantom("slab", 100, 100, 50, 2.0);
  p = p.with_volume(VoxelGrid(100, 100, 50, 2.0, 0.02f));
  const DrrImage img = render_drr(p, {100, 100, 50}, 100, 32);
  for (float v : img.pixels) CHECK(std::abs(v - std::exp(-2.0)) <= 1e-6);
}

TEST_CASE("detector outside the volume sees unattenuated beam") {
  const Phantom p = testing::box_phantom("box", 20, 20, 10, 3.0);
  const DrrImage img = render_drr(p, {5000, -4000, 15}, 60, 16);
  for (float v : img.pixels) CHECK(v == 1.0f);
  CHECK_THROWS_AS(render_drr(p, {30, 30, 15}, 60, 4), ValidationError);
  CHECK_THROWS_AS(render_drr(p, {NAN, 30, 15}, 60, 16), ValidationError);
}

TEST_CASE("translation by whole pixels shifts the image exactly") {
  const Phantom p = build_phantom(2, Demographics{}, ArmPose::arms_raised);
  const CarmPose base{300, 500, p.table_z()};
  const DrrImage a = render_drr(p, base, 320, 128);
  const DrrImage bx = render_drr(p, {base.x + 30, base.y, base.z}, 320, 128);
  const DrrImage by = render_drr(p, {base.x, base.y - 50, base.z}, 320, 128);
  const int sx = 12, sy = 20;  // 30 mm and 50 mm at 2.5 mm pitch
  for (int r = 0; r < 128; ++r)
    for (int c = 0; c + sx < 128; ++c) REQUIRE(bx.at(r, c) == a.at(r, c + sx));
  for (int r = sy; r < 128; ++r)
    for (int c = 0; c < 128; ++c) REQUIRE(by.at(r, c) == a.at(r - sy, c));
}

TEST_CASE("raising attenuation never brightens a pixel") {
  const Phantom p = testing::box_phantom("box", 24, 24, 12, 3.0);
  const CarmPose pose{36, 36, 18};
  const DrrImage base = render_drr(p, pose, 72, 24);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    VoxelGrid g = p.volume();
    std::uniform_int_distribution<std::size_t> pick(0, g.mu.size() - 1);
    std::uniform_real_distribution<float> bump(0.0f, 0.1f);
    for (int n = 0; n < 5; ++n) g.mu[pick(rng)] += bump(rng);
    const DrrImage img = render_drr(p.with_volume(g), pose, 72, 24);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) REQUIRE(img.pixels[i] <= base.pixels[i]);
  }
}

TEST_CASE("cached renderer is bit-identical to the direct path") {
  const Phantom p = build_phantom(4, Demographics{}, ArmPose::arms_crossed);
  const DrrRenderer renderer(p);
  for (const CarmPose pose : {CarmPose{100.3, 200.7, p.table_z()}, CarmPose{0, 0, p.table_z()},
                              CarmPose{p.extent().x, p.extent().y, p.table_z()}}) {
    CHECK(renderer.render(pose, 320, 64).hash() == render_drr(p, pose, 320, 64).hash());
  }
}

TEST_CASE("16-bit PNG round trip is the quantisation") {
  const Phantom p = build_phantom(4, Demographics{}, ArmPose::arms_raised);
  const DrrImage img = render_drr(p, {250, 400, p.table_z()}, 320, 64);
  const DrrImage back = decode_png16(encode_png16(img), 320);
  CHECK(back.resolution == 64);
  CHECK(back.hash() == quantize16(img).hash());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 0.5f / 65535.0f + 1e-7f);
  const auto bytes = encode_png16(back);
  CHECK(decode_png16(bytes, 320).hash() == back.hash());
}
