#include "carm/drr.hpp"

#include <cmath>

#include "carm/error.hpp"
#include "carm/hash.hpp"

namespace carm {
namespace {

constexpr double kPoseLattice = 1024.0;  // detector positions snap to 2^-10 mm

double snap(double v) { return std::nearbyint(v * kPoseLattice) / kPoseLattice; }

void check_request(const CarmPose& pose, double detector_mm, int resolution) {
  if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.z))
    throw ValidationError("render pose must be finite");
  if (resolution < 8) throw ValidationError("render resolution must be at least 8");
  if (!(detector_mm > 0) || !std::isfinite(detector_mm)) throw ValidationError("detector size must be positive");
}

// Column optical depth: k-ascending accumulation, then one scale by the voxel
// length. Both render paths use exactly this order.
double column_depth(const VoxelGrid& vol, int i, int j) {
  double acc = 0.0;
  for (int k = 0; k < vol.nz; ++k) acc += static_cast<double>(vol.at(i, j, k));
  return acc * vol.voxel_mm;
}

template <class DepthAt>
DrrImage render_with(const CarmPose& pose, double detector_mm, int resolution, int nx, int ny, double voxel,
                     DepthAt&& depth_at) {
  DrrImage img(resolution, detector_mm);
  const double pitch = detector_mm / resolution;
  const double cx = snap(pose.x), cy = snap(pose.y);
  const double half = 0.5 * resolution;
  std::vector<int> cols(static_cast<std::size_t>(resolution));
  for (int c = 0; c < resolution; ++c) {
    const double x = cx + (c + 0.5 - half) * pitch;
    const int i = static_cast<int>(std::floor(x / voxel));
    cols[static_cast<std::size_t>(c)] = (i >= 0 && i < nx) ? i : -1;
  }
  for (int r = 0; r < resolution; ++r) {
    const double y = cy + (r + 0.5 - half) * pitch;
    const int j = static_cast<int>(std::floor(y / voxel));
    if (j < 0 || j >= ny) continue;
    for (int c = 0; c < resolution; ++c) {
      const int i = cols[static_cast<std::size_t>(c)];
      if (i < 0) continue;
      img.at(r, c) = static_cast<float>(std::exp(-depth_at(i, j)));
    }
  }
  return img;
}

}  // namespace

DrrImage::DrrImage(int resolution_, double detector_mm_, float fill)
    : resolution(resolution_), detector_mm(detector_mm_) {
  if (resolution <= 0) throw ValidationError("image resolution must be positive");
  pixels.assign(static_cast<std::size_t>(resolution) * resolution, fill);
}

std::uint64_t DrrImage::hash() const {
  Fnv1a h;
  h.update(&resolution, sizeof resolution);
  h.update(std::span<const float>(pixels));
  return h.digest();
}

DrrImage render_drr(const Phantom& phantom, const CarmPose& pose, double detector_mm, int resolution) {
  check_request(pose, detector_mm, resolution);
  const VoxelGrid& vol = phantom.volume();
  return render_with(pose, detector_mm, resolution, vol.nx, vol.ny, vol.voxel_mm,
                     [&](int i, int j) { return column_depth(vol, i, j); });
}

DrrRenderer::DrrRenderer(const Phantom& phantom)
    : nx_(phantom.volume().nx), ny_(phantom.volume().ny), voxel_mm_(phantom.volume().voxel_mm) {
  const VoxelGrid& vol = phantom.volume();
  std::vector<double> acc(static_cast<std::size_t>(nx_) * ny_, 0.0);
  for (int k = 0; k < vol.nz; ++k) {
    const float* slice = vol.mu.data() + static_cast<std::size_t>(k) * nx_ * ny_;
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += static_cast<double>(slice[p]);
  }
  depth_.resize(acc.size());
  for (std::size_t p = 0; p < acc.size(); ++p) depth_[p] = acc[p] * voxel_mm_;
}

DrrImage DrrRenderer::render(const CarmPose& pose, double detector_mm, int resolution) const {
  check_request(pose, detector_mm, resolution);
  return render_with(pose, detector_mm, resolution, nx_, ny_, voxel_mm_,
                     [&](int i, int j) { return depth_[static_cast<std::size_t>(j) * nx_ + i]; });
}

}  // namespace carm
