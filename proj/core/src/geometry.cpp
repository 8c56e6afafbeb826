#include "gsmap/geometry.hpp"

#include <cmath>

namespace gsmap {

CameraIntrinsics::CameraIntrinsics(double fx_, double fy_, double cu_, double cv_,
                                   int w, int h)
    : fx(fx_), fy(fy_), cu(cu_), cv(cv_), width(w), height(h) {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw input_error("CameraIntrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0)
    throw input_error("CameraIntrinsics: sensor size must be positive");
  if (!(cu >= 0.0 && cu < width) || !(cv >= 0.0 && cv < height))
    throw input_error("CameraIntrinsics: principal point outside sensor");
}

CameraIntrinsics CameraIntrinsics::from_fov(double fov_x, int w, int h) {
  const double fx = 0.5 * w / std::tan(0.5 * fov_x);
  return CameraIntrinsics(fx, fx, 0.5 * (w - 1), 0.5 * (h - 1), w, h);
}

Pose::Pose(const Mat3d& r, const Vec3d& t) : rotation(r), translation(t) {
  const Mat3d err = rotation.transpose() * rotation - Mat3d::Identity();
  if (err.cwiseAbs().maxCoeff() > 1e-6)
    throw input_error("Pose: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > 1e-6)
    throw input_error("Pose: rotation determinant is not +1");
  if (!translation.allFinite()) throw input_error("Pose: non-finite translation");
}

std::optional<Vec3d> backproject_pixel(const CameraIntrinsics& intr, double u,
                                       double v, double depth) {
  if (!(depth > 0.0) || !std::isfinite(depth)) return std::nullopt;
  const double z = depth;
  return Vec3d((u - intr.cu) * z / intr.fx, (v - intr.cv) * z / intr.fy, z);
}

PointCloud backproject_frame(const CameraIntrinsics& intr, const Pose& pose,
                             const Image& depth_image, const Image& color_image) {
  if (depth_image.width() != intr.width || depth_image.height() != intr.height ||
      depth_image.channels() != 1)
    throw input_error("backproject_frame: depth image does not match intrinsics");
  if (color_image.width() != intr.width || color_image.height() != intr.height ||
      color_image.channels() != 3)
    throw input_error("backproject_frame: color image does not match intrinsics");

  PointCloud pc;
  pc.positions.reserve(static_cast<std::size_t>(intr.width) * intr.height);
  pc.colors.reserve(pc.positions.capacity());
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) {
      const auto p_cam = backproject_pixel(intr, u, v, depth_image.at(v, u));
      if (!p_cam) continue;
      pc.positions.push_back(pose.to_world(*p_cam));
      pc.colors.emplace_back(color_image.at(v, u, 0), color_image.at(v, u, 1),
                             color_image.at(v, u, 2));
    }
  return pc;
}

std::optional<PixelDepth> project_point(const CameraIntrinsics& intr,
                                        const Pose& pose, const Vec3d& p_world,
                                        double near_plane) {
  if (!p_world.allFinite()) throw input_error("project_point: non-finite point");
  const Vec3d p = pose.to_camera(p_world);
  if (p.z() <= near_plane) return std::nullopt;
  PixelDepth out;
  out.u = intr.fx * p.x() / p.z() + intr.cu;
  out.v = intr.fy * p.y() / p.z() + intr.cv;
  out.z = p.z();
  return out;
}

}  // namespace gsmap
