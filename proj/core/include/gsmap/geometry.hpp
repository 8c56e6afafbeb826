#pragma once

#include <optional>
#include <vector>

#include "gsmap/common.hpp"
#include "gsmap/image.hpp"

namespace gsmap {

/// Pinhole camera. (u,v) address pixel centers; continuous coordinates are
/// valid in projection, so splat centers can land between pixels.
struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cu = 0, cv = 0;
  int width = 0, height = 0;

  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double cu_, double cv_, int w, int h);

  /// Intrinsics for a square-pixel camera with the given horizontal
  /// field of view in radians.
  static CameraIntrinsics from_fov(double fov_x, int w, int h);
};

/// World-from-camera rigid transform. Orthonormality and det=+1 are
/// checked on construction (1e-6).
struct Pose {
  Mat3d rotation = Mat3d::Identity();
  Vec3d translation = Vec3d::Zero();

  Pose() = default;
  Pose(const Mat3d& r, const Vec3d& t);

  Vec3d to_world(const Vec3d& p_cam) const { return rotation * p_cam + translation; }
  Vec3d to_camera(const Vec3d& p_world) const {
    return rotation.transpose() * (p_world - translation);
  }
};

struct PointCloud {
  std::vector<Vec3d> positions;
  std::vector<Vec3d> colors;  // [0,1] per channel

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

inline constexpr double kNearPlane = 0.01;  // meters; closer points are culled

/// Eq. of the pseudo-lidar back-projection: camera-frame point for pixel
/// (u,v) at the given depth. nullopt signals a rejected pixel
/// (depth <= 0 or NaN); the caller skips it.
std::optional<Vec3d> backproject_pixel(const CameraIntrinsics& intr, double u,
                                       double v, double depth);

/// One world-frame point per valid pixel, colors copied from the color
/// image. Pixels are visited row-major, so output order is deterministic.
/// depth: 1-channel meters (0 = no return); color: 3-channel [0,1].
PointCloud backproject_frame(const CameraIntrinsics& intr, const Pose& pose,
                             const Image& depth_image, const Image& color_image);

struct PixelDepth {
  double u = 0, v = 0;
  double z = 0;  // camera-frame depth, meters
};

/// Perspective projection of a world point. nullopt when the point is at
/// or behind the near plane.
std::optional<PixelDepth> project_point(const CameraIntrinsics& intr,
                                        const Pose& pose, const Vec3d& p_world,
                                        double near_plane = kNearPlane);

}  // namespace gsmap
