#pragma once

#include <cstdint>
#include <vector>

#include "carm/geometry.hpp"
#include "carm/phantom.hpp"

namespace carm {

// Square grayscale radiograph, row-major; row 0 is the superior edge and
// column 0 the world -x edge. Pixels are transmitted intensity in [0, 1].
struct DrrImage {
  int resolution = 0;
  double detector_mm = 0.0;
  std::vector<float> pixels;

  DrrImage() = default;
  DrrImage(int resolution, double detector_mm, float fill = 1.0f);

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * resolution + col]; }
  float& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * resolution + col]; }
  double pixel_pitch() const { return detector_mm / resolution; }
  std::uint64_t hash() const;
};

struct DetectorSpec {
  double detector_mm = 320.0;
  int resolution = 256;
};

// Parallel-beam projection along +z with the detector centred at
// (pose.x, pose.y). Pixel value = exp(-optical depth of the ray through the
// pixel centre). Detector positions are snapped to a 2^-10 mm lattice so that
// shifting by a whole number of (dyadic) pixel pitches reproduces the image
// exactly.
DrrImage render_drr(const Phantom& phantom, const CarmPose& pose, double detector_mm, int resolution);

// Caches the per-column optical depth of one phantom; renders are
// bit-identical to render_drr. Immutable after construction.
class DrrRenderer {
 public:
  explicit DrrRenderer(const Phantom& phantom);

  DrrImage render(const CarmPose& pose, double detector_mm, int resolution) const;
  DrrImage render(const CarmPose& pose, const DetectorSpec& spec) const {
    return render(pose, spec.detector_mm, spec.resolution);
  }

 private:
  int nx_, ny_;
  double voxel_mm_;
  std::vector<double> depth_;  // nx * ny column sums
};

}  // namespace carm
