#pragma once

#include <stdlib.h>

#include <filesystem>
#include <string>
#include <system_error>
#include <vector>

#include "carm/phantom.hpp"

namespace carm::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "carm-test-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Small phantom with a soft-tissue block, a denser inner block and landmarks
// spaced cranio-caudally down the midline.
inline Phantom box_phantom(const std::string& case_id, int nx, int ny, int nz, double voxel_mm,
                           Demographics demographics = {}, ArmPose arm_pose = ArmPose::arms_raised) {
  VoxelGrid grid(nx, ny, nz, voxel_mm);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        float mu = 0.01f;
        if (i > nx / 4 && i < 3 * nx / 4 && j > ny / 3 && j < 2 * ny / 3) mu = 0.05f;
        if (j < ny / 8) mu = 0.0f;
        grid.at(i, j, k) = mu;
      }
  const Vec3 e = grid.extent();
  std::vector<Landmark> landmarks;
  for (int id = 1; id <= kLandmarkCount; ++id) {
    const double t = (id - 0.5) / kLandmarkCount;
    const double side = id % 2 == 0 ? 0.3 : 0.7;
    landmarks.push_back({id, std::string(landmark_name(id)), {e.x * side, e.y * t, e.z / 2}});
  }
  return Phantom(case_id, demographics, arm_pose, std::move(grid), std::move(landmarks), e.z / 2);
}

}  // namespace carm::testing
