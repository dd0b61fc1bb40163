#include "carm/phantom.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace carm {
namespace {

constexpr std::array<std::string_view, kLandmarkCount> kLandmarkNames = {
    "skull",
    "right humeral head",
    "left humeral head",
    "right scapula",
    "left scapula",
    "right elbow",
    "left elbow",
    "right wrist",
    "left wrist",
    "T1",
    "carina",
    "right hemidiaphragm",
    "left hemidiaphragm",
    "T12",
    "L5",
    "right iliac crest",
    "left iliac crest",
    "pubic symphysis",
    "right femoral head",
    "left femoral head",
};

enum LandmarkId : int {
  kSkull = 1,
  kHumeralHeadR,
  kHumeralHeadL,
  kScapulaR,
  kScapulaL,
  kElbowR,
  kElbowL,
  kWristR,
  kWristL,
  kT1,
  kCarina,
  kHemidiaphragmR,
  kHemidiaphragmL,
  kT12,
  kL5,
  kIliacCrestR,
  kIliacCrestL,
  kPubicSymphysis,
  kFemoralHeadR,
  kFemoralHeadL,
};

void require_range(double v, double lo, double hi, const char* field) {
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << "demographics." << field << " = " << v << " outside [" << lo << ", " << hi << "]";
    throw ValidationError(os.str());
  }
}

// ---------------------------------------------------------------------------
// Analytic primitives in world millimetres.

struct Box3 {
  Vec3 lo, hi;
};

class Primitive {
 public:
  virtual ~Primitive() = default;
  virtual Box3 bounds() const = 0;
  virtual bool contains(Vec3 p) const = 0;
};

class Ellipsoid final : public Primitive {
 public:
  Ellipsoid(Vec3 c, Vec3 r) : c_(c), r_(r) {}
  Box3 bounds() const override { return {c_ - r_, c_ + r_}; }
  bool contains(Vec3 p) const override {
    const Vec3 d = p - c_;
    const double q = (d.x / r_.x) * (d.x / r_.x) + (d.y / r_.y) * (d.y / r_.y) + (d.z / r_.z) * (d.z / r_.z);
    return q <= 1.0;
  }

 private:
  Vec3 c_, r_;
};

class EllipsoidShell final : public Primitive {
 public:
  EllipsoidShell(Vec3 c, Vec3 r, double thickness)
      : outer_(c, r), inner_(c, r - Vec3{thickness, thickness, thickness}), box_{c - r, c + r} {}
  Box3 bounds() const override { return box_; }
  bool contains(Vec3 p) const override { return outer_.contains(p) && !inner_.contains(p); }

 private:
  Ellipsoid outer_, inner_;
  Box3 box_;
};

class Capsule final : public Primitive {
 public:
  Capsule(Vec3 a, Vec3 b, double radius) : a_(a), b_(b), r_(radius) {}
  Box3 bounds() const override {
    const Vec3 r{r_, r_, r_};
    return {Vec3{std::min(a_.x, b_.x), std::min(a_.y, b_.y), std::min(a_.z, b_.z)} - r,
            Vec3{std::max(a_.x, b_.x), std::max(a_.y, b_.y), std::max(a_.z, b_.z)} + r};
  }
  bool contains(Vec3 p) const override {
    const Vec3 ab = b_ - a_;
    const double len2 = dot(ab, ab);
    double t = len2 > 0 ? dot(p - a_, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec3 d = p - (a_ + t * ab);
    return dot(d, d) <= r_ * r_;
  }

 private:
  Vec3 a_, b_;
  double r_;
};

// Thin elliptical hoop in the transverse plane with an anterior gap; stands in
// for a rib pair.
class RibHoop final : public Primitive {
 public:
  static constexpr double kDroop = 0.21;

  RibHoop(Vec3 centre, double half_width, double half_depth, double half_height, double thickness)
      : c_(centre), a_(half_width), b_(half_depth), h_(half_height), t_(thickness) {}
  Box3 bounds() const override {
    const double droop = kDroop * (a_ + t_) * (a_ + t_) / a_;
    return {c_ - Vec3{a_ + t_, h_, b_ + t_}, c_ + Vec3{a_ + t_, h_ + droop, b_ + t_}};
  }
  bool contains(Vec3 p) const override {
    Vec3 d = p - c_;
    d.y -= kDroop * d.x * d.x / a_;  // lateral ends sit lower
    if (std::abs(d.y) > h_) return false;
    if (d.z < -0.55 * b_ && std::abs(d.x) < 0.35 * a_) return false;
    const double rho = std::sqrt((d.x / a_) * (d.x / a_) + (d.z / b_) * (d.z / b_));
    return std::abs(rho - 1.0) * std::min(a_, b_) <= t_;
  }

 private:
  Vec3 c_;
  double a_, b_, h_, t_;
};

// Elliptical trunk cross-section interpolated along y.
class TorsoProfile final : public Primitive {
 public:
  struct Station {
    double y, half_width, half_depth;
  };
  TorsoProfile(double centre_x, double centre_z, std::vector<Station> stations)
      : cx_(centre_x), cz_(centre_z), s_(std::move(stations)) {}
  Box3 bounds() const override {
    double a = 0, b = 0;
    for (const auto& s : s_) {
      a = std::max(a, s.half_width);
      b = std::max(b, s.half_depth);
    }
    return {{cx_ - a, s_.front().y, cz_ - b}, {cx_ + a, s_.back().y, cz_ + b}};
  }
  bool contains(Vec3 p) const override {
    if (p.y < s_.front().y || p.y > s_.back().y) return false;
    auto hi = std::upper_bound(s_.begin(), s_.end(), p.y, [](double y, const Station& s) { return y < s.y; });
    if (hi == s_.end()) hi = s_.end() - 1;
    const auto lo = hi == s_.begin() ? hi : hi - 1;
    const double span = hi->y - lo->y;
    const double t = span > 0 ? (p.y - lo->y) / span : 0.0;
    const double a = lo->half_width + t * (hi->half_width - lo->half_width);
    const double b = lo->half_depth + t * (hi->half_depth - lo->half_depth);
    const double dx = (p.x - cx_) / a, dz = (p.z - cz_) / b;
    return dx * dx + dz * dz <= 1.0;
  }

 private:
  double cx_, cz_;
  std::vector<Station> s_;
};

struct Layer {
  std::unique_ptr<Primitive> shape;
  float mu;
};

// Body-frame anatomy: x lateral (+ toward the patient's left), y distance
// below the vertex, z posterior of the trunk's AP centre.
struct Anatomy {
  std::vector<Layer> layers;  // painted in order, later layers overwrite
  std::array<Vec3, kLandmarkCount> landmarks{};
  double trunk_half_depth = 0.0;
  Box3 soft_bounds{{1e300, 1e300, 1e300}, {-1e300, -1e300, -1e300}};

  template <class P, class... Args>
  void add(float mu, Args&&... args) {
    auto p = std::make_unique<P>(std::forward<Args>(args)...);
    if (mu > 0.005f) {  // radiolucent structures sit inside the soft-tissue envelope
      const Box3 b = p->bounds();
      soft_bounds.lo = {std::min(soft_bounds.lo.x, b.lo.x), std::min(soft_bounds.lo.y, b.lo.y),
                        std::min(soft_bounds.lo.z, b.lo.z)};
      soft_bounds.hi = {std::max(soft_bounds.hi.x, b.hi.x), std::max(soft_bounds.hi.y, b.hi.y),
                        std::max(soft_bounds.hi.z, b.hi.z)};
    }
    layers.push_back({std::move(p), mu});
  }
  void mark(int id, Vec3 p) { landmarks[static_cast<std::size_t>(id - 1)] = p; }
};

constexpr float kSoftTissueMu = 0.01f;
constexpr float kOrganMu = 0.0105f;
constexpr float kLungMu = 0.002f;
constexpr float kAirwayMu = 0.0005f;
constexpr float kBoneMu = 0.05f;

Vec3 mirror(Vec3 p) { return {-p.x, p.y, p.z}; }

Anatomy make_anatomy(std::uint64_t seed, const Demographics& demo, ArmPose arms) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto jitter = [&](double amplitude) { return amplitude * unit(rng); };

  const double H = demo.height_mm;
  const double female = demo.sex == 1 ? 1.0 : 0.0;
  const double ref_weight = 22.5 * (H / 1000.0) * (H / 1000.0);
  const double wf = std::clamp(demo.weight_kg / ref_weight, 0.5, 2.5);
  const double widen = std::pow(wf, 0.35);
  const double deepen = std::pow(wf, 0.5);
  const float bone = static_cast<float>(kBoneMu * (1.0 - 0.2 * (demo.age_years - 18.0) / 82.0));

  const double shoulder = 1.0 + jitter(0.03);
  const double pelvis = (1.0 + 0.10 * female) * (1.0 + jitter(0.03));
  const double spine_z = 0.035 * H;

  Anatomy a;

  // Soft-tissue envelope.
  a.trunk_half_depth = 0.066 * H * deepen;
  std::vector<TorsoProfile::Station> trunk = {
      {0.165 * H, 0.060 * H * widen, 0.045 * H * deepen}, {0.190 * H, 0.112 * H * shoulder * widen, 0.058 * H * deepen},
      {0.250 * H, 0.100 * H * widen, 0.066 * H * deepen}, {0.330 * H, 0.093 * H * widen, 0.066 * H * deepen},
      {0.400 * H, 0.086 * H * widen, 0.064 * H * deepen}, {0.470 * H, 0.104 * H * pelvis * widen, 0.064 * H * deepen},
      {0.530 * H, 0.108 * H * pelvis * widen, 0.062 * H * deepen}};
  a.add<TorsoProfile>(kSoftTissueMu, 0.0, 0.0, trunk);
  a.add<Capsule>(kSoftTissueMu, Vec3{0, 0.10 * H, 0.010 * H}, Vec3{0, 0.175 * H, 0.010 * H}, 0.034 * H * widen);
  a.add<Ellipsoid>(kSoftTissueMu, Vec3{0, 0.062 * H, 0}, Vec3{0.047 * H, 0.062 * H, 0.060 * H});
  a.add<Ellipsoid>(kSoftTissueMu, Vec3{0, 0.110 * H, -0.030 * H}, Vec3{0.036 * H, 0.030 * H, 0.035 * H});
  for (double side : {-1.0, 1.0}) {
    a.add<Capsule>(kSoftTissueMu, Vec3{side * 0.050 * H * pelvis, 0.520 * H, 0},
                   Vec3{side * 0.058 * H * pelvis, 0.700 * H, 0}, 0.050 * H * widen);
    a.add<Ellipsoid>(kSoftTissueMu, Vec3{side * 0.110 * H * shoulder, 0.195 * H, 0.005 * H},
                     Vec3{0.030 * H * widen, 0.032 * H, 0.030 * H * widen});
  }

  // Arms: shoulder, elbow, wrist, fingertip per side. Right side is -x.
  const Vec3 humeral_head{0.110 * H * shoulder, 0.190 * H, 0.0};
  Vec3 elbow, wrist;
  if (arms == ArmPose::arms_raised) {
    elbow = {0.150 * H * shoulder, 0.020 * H, 0.0};
    wrist = {0.135 * H * shoulder, -0.125 * H, 0.0};
  } else {
    elbow = {0.088 * H * widen, 0.330 * H, -0.060 * H * deepen - 0.01 * H};
    wrist = {-0.035 * H, 0.260 * H, -0.075 * H * deepen - 0.01 * H};
  }
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? -1.0 : 1.0;
    auto sided = [&](Vec3 p) { return side > 0 ? p : mirror(p); };
    // Per-side offsets keep the left/right means symmetric over seeds.
    const Vec3 hh = sided(humeral_head) + Vec3{jitter(2.0), jitter(2.0), 0};
    Vec3 el = sided(elbow) + Vec3{jitter(6.0), jitter(6.0), 0};
    Vec3 wr = sided(wrist) + Vec3{jitter(6.0), jitter(6.0), 0};
    if (arms == ArmPose::arms_crossed && s == 1) wr.y += 0.010 * H;  // forearms overlap
    const Vec3 fore = wr - el;
    const Vec3 hand_tip = wr + (0.07 * H / norm(fore)) * fore;

    a.add<Capsule>(kSoftTissueMu, hh, el, 0.028 * H * widen);
    a.add<Capsule>(kSoftTissueMu, el, wr, 0.022 * H * widen);
    a.add<Capsule>(kSoftTissueMu, wr, hand_tip, 0.016 * H);

    a.add<Ellipsoid>(bone, hh, Vec3{0.014 * H, 0.014 * H, 0.014 * H});
    a.add<Capsule>(bone, hh, el, 0.0075 * H);
    a.add<Ellipsoid>(bone, el, Vec3{0.012 * H, 0.009 * H, 0.010 * H});
    const Vec3 lateral{0.005 * H, 0, 0};
    a.add<Capsule>(bone, el + lateral, wr + lateral, 0.0040 * H);
    a.add<Capsule>(bone, el - lateral, wr - lateral, 0.0040 * H);
    a.add<Ellipsoid>(bone, wr, Vec3{0.010 * H, 0.008 * H, 0.007 * H});
    a.add<Capsule>(bone, wr + (0.015 * H / norm(fore)) * fore, hand_tip, 0.006 * H);

    a.mark(s == 0 ? kHumeralHeadR : kHumeralHeadL, hh);
    a.mark(s == 0 ? kElbowR : kElbowL, el);
    a.mark(s == 0 ? kWristR : kWristL, wr);

    // Shoulder girdle.
    const Vec3 scap = Vec3{side * 0.085 * H * shoulder, 0.235 * H, 0.052 * H} + Vec3{jitter(3.0), jitter(3.0), 0};
    a.add<Ellipsoid>(bone, scap, Vec3{0.028 * H, 0.045 * H, 0.004 * H});
    a.add<Capsule>(bone, Vec3{side * 0.012 * H, 0.183 * H, -0.050 * H}, Vec3{side * 0.100 * H * shoulder, 0.176 * H, -0.005 * H},
                   0.0045 * H);
    a.mark(s == 0 ? kScapulaR : kScapulaL, scap);
  }

  // Airways and lungs; the lung base is the diaphragm dome.
  const double lung_depth = std::min(0.056 * H, 0.066 * H * deepen - 0.015 * H);
  const Vec3 carina{jitter(2.0), 0.232 * H + jitter(3.0), 0.0};
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? -1.0 : 1.0;
    const double dome = (s == 0 ? 0.318 : 0.330) * H + jitter(0.005 * H);
    const double top = 0.165 * H;
    const Vec3 centre{side * 0.050 * H, 0.5 * (top + dome), 0.006 * H};
    a.add<Ellipsoid>(kLungMu, centre, Vec3{0.040 * H * std::sqrt(widen), 0.5 * (dome - top), lung_depth});
    a.mark(s == 0 ? kHemidiaphragmR : kHemidiaphragmL, Vec3{centre.x, dome, centre.z});
  }
  a.add<Ellipsoid>(kOrganMu, Vec3{0.018 * H, 0.290 * H, -0.015 * H}, Vec3{0.040 * H, 0.040 * H, 0.035 * H});  // heart
  a.add<Ellipsoid>(kOrganMu, Vec3{-0.040 * H, 0.360 * H, 0.0}, Vec3{0.055 * H, 0.035 * H, 0.045 * H});        // liver
  a.add<Capsule>(kAirwayMu, Vec3{0, 0.115 * H, -0.025 * H}, carina, 0.008 * H);
  for (double side : {-1.0, 1.0})
    a.add<Capsule>(kAirwayMu, carina, Vec3{side * 0.040 * H, 0.262 * H, 0.005 * H}, 0.0055 * H);
  a.mark(kCarina, carina);

  // Skull: cortical shell around soft tissue, plus mandible.
  const Vec3 skull{jitter(1.5), 0.058 * H + jitter(2.0), 0.004 * H};
  a.add<EllipsoidShell>(bone, skull, Vec3{0.043 * H, 0.055 * H, 0.055 * H}, 7.0);
  a.add<Capsule>(bone, Vec3{-0.030 * H, 0.105 * H, -0.010 * H}, Vec3{0, 0.128 * H, -0.045 * H}, 0.005 * H);
  a.add<Capsule>(bone, Vec3{0.030 * H, 0.105 * H, -0.010 * H}, Vec3{0, 0.128 * H, -0.045 * H}, 0.005 * H);
  a.mark(kSkull, skull);

  // Spine: 7 cervical, 12 thoracic, 5 lumbar vertebral bodies with a mild
  // seed-dependent lateral curve.
  const double curve = jitter(0.004 * H);
  auto vertebra_y = [&](int level) {  // level 0..23 = C1..L5
    if (level < 7) return H * (0.125 + 0.045 * level / 6.0);
    if (level < 19) return H * (0.178 + 0.177 * (level - 7) / 11.0);
    return H * (0.373 + 0.059 * (level - 19) / 4.0);
  };
  for (int level = 0; level < 24; ++level) {
    const double y = vertebra_y(level);
    const double phase = std::sin(3.14159265358979 * (y - 0.125 * H) / (0.31 * H));
    const Vec3 c{curve * phase, y, spine_z};
    Vec3 r;
    if (level < 7)
      r = {0.011 * H, 0.0055 * H, 0.009 * H};
    else if (level < 19)
      r = {0.015 * H, 0.0062 * H, 0.012 * H};
    else
      r = {0.022 * H, 0.0075 * H, 0.016 * H};
    a.add<Ellipsoid>(bone, c, r);
    a.add<Ellipsoid>(bone, c + Vec3{0, 0.002 * H, r.z + 0.014 * H}, Vec3{0.004 * H, 0.004 * H, 0.014 * H});
    if (level == 7) a.mark(kT1, c);
    if (level == 18) a.mark(kT12, c);
    if (level == 23) a.mark(kL5, c);
    if (level >= 7 && level < 19) {
      const int t = level - 7;  // 0..11
      const double half_width = H * (0.050 + 0.038 * std::sin(3.14159265358979 * std::min(t + 1, 9) / 18.0));
      const double half_depth = std::min(0.055 * H, 0.066 * H * deepen - 0.010 * H);
      a.add<RibHoop>(bone, Vec3{0, y + 0.020 * H, 0.008 * H}, half_width, half_depth, 0.0035 * H, 0.0035 * H);
    }
  }
  a.add<Ellipsoid>(bone, Vec3{0, 0.250 * H, -0.060 * H * std::min(deepen, 1.15)}, Vec3{0.012 * H, 0.050 * H, 0.005 * H});

  // Pelvis and hips.
  const double hip = 1.0 + 0.6 * (pelvis - 1.0);
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? -1.0 : 1.0;
    const Vec3 wing{side * 0.070 * H * pelvis + jitter(2.0), 0.447 * H, 0.012 * H};
    const double wing_half_height = 0.037 * H;
    a.add<Ellipsoid>(bone, wing, Vec3{0.034 * H * pelvis, wing_half_height, 0.006 * H});
    a.mark(s == 0 ? kIliacCrestR : kIliacCrestL, Vec3{wing.x, wing.y - wing_half_height, wing.z});

    const Vec3 femoral_head{side * 0.050 * H * hip + jitter(3.0), 0.490 * H + jitter(2.0), -0.005 * H};
    a.add<Ellipsoid>(bone, femoral_head, Vec3{0.014 * H, 0.014 * H, 0.014 * H});
    const Vec3 trochanter{side * 0.078 * H * hip, 0.512 * H, 0.0};
    a.add<Capsule>(bone, femoral_head, trochanter, 0.0075 * H);
    a.add<Capsule>(bone, trochanter, Vec3{side * 0.064 * H * hip, 0.680 * H, 0.0}, 0.0085 * H);
    a.mark(s == 0 ? kFemoralHeadR : kFemoralHeadL, femoral_head);

    a.add<Capsule>(bone, femoral_head + Vec3{-side * 0.012 * H, 0.010 * H, -0.010 * H},
                   Vec3{side * 0.007 * H, 0.512 * H, -0.045 * H}, 0.0055 * H);
    a.add<Capsule>(bone, wing, Vec3{side * 0.018 * H, 0.452 * H, 0.040 * H}, 0.008 * H);
  }
  const Vec3 symphysis{jitter(1.5), 0.512 * H + jitter(2.0), -0.045 * H};
  a.add<Ellipsoid>(bone, symphysis, Vec3{0.012 * H, 0.012 * H, 0.008 * H});
  a.add<Ellipsoid>(bone, Vec3{0, 0.457 * H, 0.045 * H}, Vec3{0.026 * H, 0.030 * H, 0.012 * H});  // sacrum
  a.mark(kPubicSymphysis, symphysis);

  return a;
}

int voxel_floor(double v, double voxel) { return static_cast<int>(std::floor(v / voxel)); }

void paint(VoxelGrid& grid, const Primitive& shape, float mu, Vec3 offset) {
  const Box3 b = shape.bounds();
  const double v = grid.voxel_mm;
  const int i0 = std::max(0, voxel_floor(b.lo.x + offset.x, v)), i1 = std::min(grid.nx - 1, voxel_floor(b.hi.x + offset.x, v));
  const int j0 = std::max(0, voxel_floor(b.lo.y + offset.y, v)), j1 = std::min(grid.ny - 1, voxel_floor(b.hi.y + offset.y, v));
  const int k0 = std::max(0, voxel_floor(b.lo.z + offset.z, v)), k1 = std::min(grid.nz - 1, voxel_floor(b.hi.z + offset.z, v));
  for (int k = k0; k <= k1; ++k)
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) {
        const Vec3 p{(i + 0.5) * v - offset.x, (j + 0.5) * v - offset.y, (k + 0.5) * v - offset.z};
        if (shape.contains(p)) grid.at(i, j, k) = mu;
      }
}

double round_up(double v, double step) { return std::ceil(v / step - 1e-9) * step; }

}  // namespace

// ---------------------------------------------------------------------------

void Demographics::validate() const {
  require_range(age_years, 18.0, 100.0, "age_years");
  if (sex != 0 && sex != 1) throw ValidationError("demographics.sex must be 0 (male) or 1 (female)");
  require_range(height_mm, 1400.0, 2000.0, "height_mm");
  require_range(weight_kg, 40.0, 150.0, "weight_kg");
}

std::string_view to_string(ArmPose pose) {
  return pose == ArmPose::arms_raised ? "arms_raised" : "arms_crossed";
}

ArmPose parse_arm_pose(std::string_view text) {
  if (text == "arms_raised") return ArmPose::arms_raised;
  if (text == "arms_crossed") return ArmPose::arms_crossed;
  throw ValidationError("unknown arm pose '" + std::string(text) + "'");
}

std::string_view landmark_name(int id) {
  if (id < 1 || id > kLandmarkCount) throw ValidationError("landmark id " + std::to_string(id) + " outside 1..20");
  return kLandmarkNames[static_cast<std::size_t>(id - 1)];
}

int landmark_id(std::string_view name) {
  for (int i = 0; i < kLandmarkCount; ++i)
    if (kLandmarkNames[static_cast<std::size_t>(i)] == name) return i + 1;
  throw ValidationError("unknown landmark name '" + std::string(name) + "'");
}

VoxelGrid::VoxelGrid(int nx_, int ny_, int nz_, double voxel_mm_, float fill)
    : nx(nx_), ny(ny_), nz(nz_), voxel_mm(voxel_mm_) {
  if (nx <= 0 || ny <= 0 || nz <= 0 || !(voxel_mm > 0)) throw ValidationError("voxel grid dimensions must be positive");
  mu.assign(static_cast<std::size_t>(nx) * ny * nz, fill);
}

bool VoxelGrid::contains(Vec3 p) const {
  const Vec3 e = extent();
  return p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x <= e.x && p.y <= e.y && p.z <= e.z;
}

double VoxelGrid::mu_at(Vec3 p) const {
  const int i = voxel_floor(p.x, voxel_mm), j = voxel_floor(p.y, voxel_mm), k = voxel_floor(p.z, voxel_mm);
  if (i < 0 || j < 0 || k < 0 || i >= nx || j >= ny || k >= nz) return 0.0;
  return at(i, j, k);
}

std::uint64_t VoxelGrid::hash() const {
  Fnv1a h;
  const int dims[3] = {nx, ny, nz};
  h.update(dims, sizeof dims);
  h.update(&voxel_mm, sizeof voxel_mm);
  h.update(std::span<const float>(mu));
  return h.digest();
}

Phantom::Phantom(std::string case_id, Demographics demographics, ArmPose arm_pose, VoxelGrid volume,
                 std::vector<Landmark> landmarks, double table_z)
    : case_id_(std::move(case_id)),
      demographics_(demographics),
      arm_pose_(arm_pose),
      volume_(std::move(volume)),
      landmarks_(std::move(landmarks)),
      table_z_(table_z) {
  demographics_.validate();
  if (case_id_.empty()) throw ValidationError("case_id must not be empty");
  if (volume_.mu.size() != static_cast<std::size_t>(volume_.nx) * volume_.ny * volume_.nz)
    throw ValidationError("volume size does not match its dimensions");
  for (float m : volume_.mu)
    if (!(m >= 0.0f) || !std::isfinite(m)) throw ValidationError("volume attenuation must be finite and non-negative");
  if (!std::isfinite(table_z_)) throw ValidationError("table_z must be finite");
  if (landmarks_.size() != static_cast<std::size_t>(kLandmarkCount))
    throw ValidationError("phantom needs exactly 20 landmarks, got " + std::to_string(landmarks_.size()));
  std::sort(landmarks_.begin(), landmarks_.end(), [](const Landmark& a, const Landmark& b) { return a.id < b.id; });
  for (int i = 0; i < kLandmarkCount; ++i) {
    const Landmark& lm = landmarks_[static_cast<std::size_t>(i)];
    if (lm.id != i + 1) throw ValidationError("landmark ids must be 1..20, each exactly once");
    if (lm.name != landmark_name(lm.id))
      throw ValidationError("landmark " + std::to_string(lm.id) + " must be named '" + std::string(landmark_name(lm.id)) + "'");
    if (!volume_.contains(lm.position)) throw ValidationError("landmark '" + lm.name + "' lies outside the volume");
  }
  const int chain[] = {kSkull, kT1, kT12, kL5, kPubicSymphysis};
  for (std::size_t i = 0; i + 1 < std::size(chain); ++i) {
    const auto& upper = landmarks_[static_cast<std::size_t>(chain[i] - 1)];
    const auto& lower = landmarks_[static_cast<std::size_t>(chain[i + 1] - 1)];
    if (!(upper.position.y < lower.position.y))
      throw ValidationError("landmark '" + upper.name + "' must be superior to '" + lower.name + "'");
  }
}

Phantom Phantom::with_volume(VoxelGrid volume) const {
  return Phantom(case_id_, demographics_, arm_pose_, std::move(volume), landmarks_, table_z_);
}

Phantom build_phantom(std::uint64_t seed, const Demographics& demographics, ArmPose arm_pose,
                      const PhantomOptions& options) {
  demographics.validate();
  if (!(options.voxel_mm > 0)) throw ValidationError("voxel_mm must be positive");
  const Anatomy anatomy = make_anatomy(seed, demographics, arm_pose);
  const double H = demographics.height_mm;

  // Crop at the proximal thighs; pad 30 mm elsewhere; extents are whole
  // multiples of 30 mm so the default grid lands on both boundaries.
  constexpr double kMargin = 30.0;
  constexpr double kStep = 30.0;
  const Box3& sb = anatomy.soft_bounds;
  const double half_width = std::max(std::abs(sb.lo.x), std::abs(sb.hi.x)) + kMargin;
  const double half_depth = std::max(std::abs(sb.lo.z), std::abs(sb.hi.z)) + 0.5 * kMargin;
  const double top = sb.lo.y - kMargin;
  const double bottom = 0.570 * H;
  const double step = std::lcm(static_cast<long>(std::llround(kStep * 1000)),
                               static_cast<long>(std::llround(options.voxel_mm * 1000))) / 1000.0;
  const Vec3 extent{round_up(2 * half_width, step), round_up(bottom - top, step), round_up(2 * half_depth, step)};
  const Vec3 offset{extent.x / 2, -top, extent.z / 2};  // world = body + offset

  VoxelGrid grid(static_cast<int>(std::lround(extent.x / options.voxel_mm)),
                 static_cast<int>(std::lround(extent.y / options.voxel_mm)),
                 static_cast<int>(std::lround(extent.z / options.voxel_mm)), options.voxel_mm);
  for (const auto& layer : anatomy.layers) paint(grid, *layer.shape, layer.mu, offset);

  std::vector<Landmark> landmarks;
  landmarks.reserve(kLandmarkCount);
  for (int id = 1; id <= kLandmarkCount; ++id)
    landmarks.push_back({id, std::string(landmark_name(id)), anatomy.landmarks[static_cast<std::size_t>(id - 1)] + offset});

  // The detector rides a fixed stand-off above the anterior skin, so its
  // depth tracks body habitus; it is reported relative to the volume
  // mid-plane and bounded to +-50 mm.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double table_offset =
      std::clamp(anatomy.trunk_half_depth - 120.0 + std::uniform_real_distribution<double>(-3.0, 3.0)(rng), -50.0, 50.0);
  const double table_z = extent.z / 2 + table_offset;

  std::string case_id = options.case_id;
  if (case_id.empty()) case_id = "case_" + std::to_string(seed);
  return Phantom(std::move(case_id), demographics, arm_pose, std::move(grid), std::move(landmarks), table_z);
}

std::vector<CohortMember> sample_cohort(int cases, std::uint64_t seed) {
  if (cases < 1) throw ValidationError("cohort needs at least one case");
  std::mt19937_64 rng(seed);
  std::vector<CohortMember> out;
  out.reserve(static_cast<std::size_t>(cases));
  for (int i = 0; i < cases; ++i) {
    CohortMember m;
    char id[32];
    std::snprintf(id, sizeof id, "case-%03d", i);
    m.case_id = id;
    m.seed = rng();
    m.demographics.sex = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
    m.demographics.age_years = std::uniform_real_distribution<double>(20.0, 90.0)(rng);
    const double mean_h = m.demographics.sex == 1 ? 1620.0 : 1750.0;
    m.demographics.height_mm = std::clamp(std::normal_distribution<double>(mean_h, 70.0)(rng), 1450.0, 1950.0);
    const double bmi = std::clamp(std::normal_distribution<double>(25.0, 4.0)(rng), 17.0, 40.0);
    const double h_m = m.demographics.height_mm / 1000.0;
    m.demographics.weight_kg = std::clamp(bmi * h_m * h_m, 40.0, 150.0);
    m.arm_pose = i % 2 == 0 ? ArmPose::arms_raised : ArmPose::arms_crossed;
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Phantom> generate_cohort(int cases, std::uint64_t seed, const PhantomOptions& options) {
  std::vector<Phantom> out;
  for (const auto& m : sample_cohort(cases, seed)) {
    PhantomOptions o = options;
    o.case_id = m.case_id;
    out.push_back(build_phantom(m.seed, m.demographics, m.arm_pose, o));
  }
  return out;
}

std::vector<Landmark> landmark_positions(const Phantom& phantom) { return phantom.landmarks(); }

double line_integral(const VoxelGrid& volume, const Ray& ray) {
  const double len = norm(ray.direction);
  if (!(len > 0) || !std::isfinite(len)) throw ValidationError("ray direction must be non-zero and finite");
  const Vec3 d = (1.0 / len) * ray.direction;
  const Vec3 o = ray.origin;
  const Vec3 e = volume.extent();
  const double od[3] = {o.x, o.y, o.z}, dd[3] = {d.x, d.y, d.z}, ed[3] = {e.x, e.y, e.z};
  const int n[3] = {volume.nx, volume.ny, volume.nz};

  double t_enter = 0.0, t_exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dd[a] == 0.0) {
      if (od[a] < 0.0 || od[a] > ed[a]) return 0.0;
      continue;
    }
    double t0 = (0.0 - od[a]) / dd[a], t1 = (ed[a] - od[a]) / dd[a];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (!(t_exit > t_enter)) return 0.0;

  const double v = volume.voxel_mm;
  const double t_mid = t_enter + 1e-9 * (t_exit - t_enter);
  int idx[3], step[3];
  double t_max[3], t_delta[3];
  for (int a = 0; a < 3; ++a) {
    const double p = od[a] + t_mid * dd[a];
    idx[a] = std::clamp(static_cast<int>(std::floor(p / v)), 0, n[a] - 1);
    if (dd[a] > 0) {
      step[a] = 1;
      t_max[a] = ((idx[a] + 1) * v - od[a]) / dd[a];
      t_delta[a] = v / dd[a];
    } else if (dd[a] < 0) {
      step[a] = -1;
      t_max[a] = (idx[a] * v - od[a]) / dd[a];
      t_delta[a] = -v / dd[a];
    } else {
      step[a] = 0;
      t_max[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = 0;
    }
  }

  double sum = 0.0, t = t_enter;
  while (t < t_exit) {
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    const double t_next = std::min(t_max[axis], t_exit);
    if (t_next > t) sum += volume.at(idx[0], idx[1], idx[2]) * (t_next - t);
    t = t_next;
    if (t >= t_exit) break;
    idx[axis] += step[axis];
    if (idx[axis] < 0 || idx[axis] >= n[axis]) break;
    t_max[axis] += t_delta[axis];
  }
  return sum;
}

double line_integral(const Phantom& phantom, const Ray& ray) { return line_integral(phantom.volume(), ray); }

// ---------------------------------------------------------------------------
// Text formats and export.

std::string format_exact(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  if (std::strtod(buf, nullptr) == value) return buf;
  auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed);
  if (res.ec == std::errc()) return std::string(buf, res.ptr);
  res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string format_landmark_table(const std::vector<Landmark>& landmarks) {
  std::string out = "# id\tname\tx\ty\tz\n";
  for (const auto& lm : landmarks) {
    out += std::to_string(lm.id) + '\t' + lm.name + '\t' + format_exact(lm.position.x) + '\t' +
           format_exact(lm.position.y) + '\t' + format_exact(lm.position.z) + '\n';
  }
  return out;
}

using detail::parse_double;
using detail::read_file;
using detail::split_tabs;

std::vector<Landmark> parse_landmark_table(std::string_view text) {
  std::vector<Landmark> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_tabs(line);
    if (f.size() != 5) throw ValidationError("landmark table row needs 5 tab-separated fields: '" + line + "'");
    Landmark lm;
    lm.id = static_cast<int>(parse_double(f[0], "landmark id"));
    lm.name = f[1];
    lm.position = {parse_double(f[2], "x"), parse_double(f[3], "y"), parse_double(f[4], "z")};
    out.push_back(std::move(lm));
  }
  return out;
}

void export_phantom(const Phantom& phantom, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const VoxelGrid& vol = phantom.volume();
  {
    std::ofstream out(dir / "volume.raw", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "volume.raw").string());
    static_assert(std::endian::native == std::endian::little, "volume export assumes a little-endian host");
    out.write(reinterpret_cast<const char*>(vol.mu.data()), static_cast<std::streamsize>(vol.mu.size() * sizeof(float)));
  }
  const Demographics& d = phantom.demographics();
  const Vec3 e = phantom.extent();
  nlohmann::ordered_json header = {
      {"format", "carm-phantom"},
      {"version", 1},
      {"case_id", phantom.case_id()},
      {"dims", {vol.nx, vol.ny, vol.nz}},
      {"voxel_mm", vol.voxel_mm},
      {"extent_mm", {e.x, e.y, e.z}},
      {"origin_mm", {0.0, 0.0, 0.0}},
      {"table_z", phantom.table_z()},
      {"arm_pose", to_string(phantom.arm_pose())},
      {"demographics",
       {{"age_years", d.age_years}, {"sex", d.sex}, {"height_mm", d.height_mm}, {"weight_kg", d.weight_kg}}},
      {"volume_file", "volume.raw"},
      {"dtype", "float32-le"},
      {"order", "x-fastest"},
      {"volume_hash", to_hex(vol.hash())},
  };
  std::ofstream(dir / "header.json") << header.dump(2) << '\n';
  std::ofstream(dir / "landmarks.tsv") << format_landmark_table(phantom.landmarks());
}

Phantom load_phantom(const std::filesystem::path& dir) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(read_file(dir / "header.json"));
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError("malformed phantom header in " + dir.string() + ": " + ex.what());
  }
  try {
    const auto dims = header.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw ValidationError("phantom header dims must have 3 entries");
    VoxelGrid vol(dims[0], dims[1], dims[2], header.at("voxel_mm").get<double>());
    const std::string raw = read_file(dir / header.value("volume_file", std::string("volume.raw")));
    if (raw.size() != vol.mu.size() * sizeof(float))
      throw ValidationError("volume file size does not match header dims in " + dir.string());
    std::memcpy(vol.mu.data(), raw.data(), raw.size());
    const auto& dj = header.at("demographics");
    Demographics demo{dj.at("age_years").get<double>(), dj.at("sex").get<int>(), dj.at("height_mm").get<double>(),
                      dj.at("weight_kg").get<double>()};
    return Phantom(header.at("case_id").get<std::string>(), demo, parse_arm_pose(header.at("arm_pose").get<std::string>()),
                   std::move(vol), parse_landmark_table(read_file(dir / "landmarks.tsv")), header.at("table_z").get<double>());
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError("malformed phantom header in " + dir.string() + ": " + ex.what());
  }
}

}  // namespace carm
