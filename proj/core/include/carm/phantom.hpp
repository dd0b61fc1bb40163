#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "carm/geometry.hpp"

namespace carm {

struct Demographics {
  double age_years = 40.0;
  int sex = 0;  // 0 = male, 1 = female
  double height_mm = 1700.0;
  double weight_kg = 70.0;

  // Throws ValidationError naming the first out-of-range field.
  void validate() const;

  std::array<double, 4> as_array() const { return {age_years, double(sex), height_mm, weight_kg}; }
  friend bool operator==(const Demographics&, const Demographics&) = default;
};

enum class ArmPose { arms_raised, arms_crossed };

std::string_view to_string(ArmPose pose);
ArmPose parse_arm_pose(std::string_view text);

inline constexpr int kLandmarkCount = 20;

// Fixed id <-> name table, ids 1..20 in annotation order (skull first,
// femoral heads last). Paired structures list the right side first.
std::string_view landmark_name(int id);
int landmark_id(std::string_view name);

struct Landmark {
  int id = 0;
  std::string name;
  Vec3 position;
};

// Linear attenuation coefficients (per mm) on a regular grid. Voxel (i, j, k)
// covers [i, i+1) * voxel_mm along x, and likewise for y and z. Storage is
// x-fastest: index = (k * ny + j) * nx + i.
struct VoxelGrid {
  int nx = 0;
  int ny = 0;
  int nz = 0;
  double voxel_mm = 1.0;
  std::vector<float> mu;

  VoxelGrid() = default;
  VoxelGrid(int nx, int ny, int nz, double voxel_mm, float fill = 0.0f);

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * ny + j) * nx + i;
  }
  float at(int i, int j, int k) const { return mu[index(i, j, k)]; }
  float& at(int i, int j, int k) { return mu[index(i, j, k)]; }

  Vec3 extent() const { return {nx * voxel_mm, ny * voxel_mm, nz * voxel_mm}; }
  bool contains(Vec3 p) const;
  // Attenuation at a world point; zero outside the grid.
  double mu_at(Vec3 p) const;
  std::uint64_t hash() const;
};

class Phantom {
 public:
  // Validates every invariant (non-negative volume, complete landmark table
  // inside the extent, cranio-caudal ordering) and throws ValidationError.
  Phantom(std::string case_id, Demographics demographics, ArmPose arm_pose, VoxelGrid volume,
          std::vector<Landmark> landmarks, double table_z);

  const std::string& case_id() const { return case_id_; }
  const Demographics& demographics() const { return demographics_; }
  ArmPose arm_pose() const { return arm_pose_; }
  const VoxelGrid& volume() const { return volume_; }
  const std::vector<Landmark>& landmarks() const { return landmarks_; }
  double table_z() const { return table_z_; }
  Vec3 extent() const { return volume_.extent(); }
  Vec3 origin() const { return {0.0, 0.0, 0.0}; }

  // Same case with a replaced volume; the new grid must cover the landmarks.
  Phantom with_volume(VoxelGrid volume) const;

 private:
  std::string case_id_;
  Demographics demographics_;
  ArmPose arm_pose_;
  VoxelGrid volume_;
  std::vector<Landmark> landmarks_;
  double table_z_;
};

struct PhantomOptions {
  double voxel_mm = 3.0;
  std::string case_id;  // empty: derived from the seed
};

// Procedural full-body phantom from analytic primitives. Deterministic in
// (seed, demographics, arm_pose, options).
Phantom build_phantom(std::uint64_t seed, const Demographics& demographics, ArmPose arm_pose,
                      const PhantomOptions& options = {});

// Synthetic cohort: demographics drawn from seed, arm poses alternating
// (even index raised, odd crossed), case ids "case-000", "case-001", ...
struct CohortMember {
  std::string case_id;
  std::uint64_t seed = 0;
  Demographics demographics;
  ArmPose arm_pose = ArmPose::arms_raised;
};
std::vector<CohortMember> sample_cohort(int cases, std::uint64_t seed);
std::vector<Phantom> generate_cohort(int cases, std::uint64_t seed, const PhantomOptions& options = {});

// Landmarks sorted by id.
std::vector<Landmark> landmark_positions(const Phantom& phantom);

// Optical depth along the half-line origin + t * direction, t >= 0, through
// the piecewise-constant volume. Exact voxel traversal.
double line_integral(const VoxelGrid& volume, const Ray& ray);
double line_integral(const Phantom& phantom, const Ray& ray);

// Phantom directory: volume.raw (little-endian float32, x-fastest),
// header.json, landmarks.tsv.
void export_phantom(const Phantom& phantom, const std::filesystem::path& dir);
Phantom load_phantom(const std::filesystem::path& dir);

// Landmark table text: "id<TAB>name<TAB>x<TAB>y<TAB>z" lines under a
// '#'-prefixed header.
std::string format_landmark_table(const std::vector<Landmark>& landmarks);
std::vector<Landmark> parse_landmark_table(std::string_view text);

// Shortest decimal text that parses back to exactly the same double, with
// at least six fractional digits where that still round-trips.
std::string format_exact(double value);

}  // namespace carm
