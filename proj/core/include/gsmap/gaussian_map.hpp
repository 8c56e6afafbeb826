#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gsmap/common.hpp"
#include "gsmap/geometry.hpp"

namespace gsmap {

/// One anisotropic splat. Parameters are stored in f32; all rendering and
/// optimization lifts them to f64.
struct Gaussian {
  Vec3f mu = Vec3f::Zero();          // meters
  Vec3f scale = Vec3f::Ones();       // per-axis standard deviations, meters
  Vec4f quat{1.f, 0.f, 0.f, 0.f};    // unit quaternion, (w,x,y,z)
  float opacity = 0.5f;              // [0,1]
  Vec3f color = Vec3f::Zero();       // [0,1]
  float semantic = 0.f;              // compact semantic code

  /// Throws input_error on any violated field invariant.
  void validate() const;
};

enum class MapFrame : uint8_t { kWorld = 0, kEgocentric = 1 };

struct GaussianMap {
  std::vector<Gaussian> gaussians;
  MapFrame frame = MapFrame::kWorld;
  int64_t frame_node = -1;  // node id when frame == kEgocentric
  int64_t step = 0;         // creation step t

  std::size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
};

/// concat(mu, color, semantic) in f64.
using GaussianFeature = Eigen::Matrix<double, 7, 1>;

/// Rotation matrix of a (w,x,y,z) quaternion, normalized first.
Mat3d quat_to_rotation(const Vec4d& q);

/// Sigma = R diag(scale^2) R^T. Symmetric positive definite for valid inputs.
Mat3d covariance_from(const Vec3d& scale, const Vec4d& quat);

struct InitConfig {
  double voxel_cell = 0.05;     // meters; 0 disables downsampling
  double initial_opacity = 0.5;
  double sem_init_range = 0.1;  // semantic ~ U[-range, +range]
  double nn_scale_factor = 0.5; // scale = factor * mean 3-NN distance
  double scale_min = 0.005;     // meters
  double scale_max = 0.5;       // meters
  double fallback_scale = 0.05; // meters, used when no neighbor exists
  uint64_t seed = 0;            // semantic initialization
};

struct InitResult {
  GaussianMap map;
  /// Index into the input cloud of the point each Gaussian came from
  /// (voxel downsampling keeps the first point per cell).
  std::vector<std::size_t> source_indices;
};

/// One Gaussian per retained point: identity rotation, isotropic scale from
/// the nearest-neighbor rule, uniform random semantic code.
InitResult init_from_pointcloud(const PointCloud& pc, const InitConfig& cfg);

/// Arithmetic mean of the selected Gaussians' 7-vectors. Throws
/// input_error on an empty or out-of-range selection.
GaussianFeature pooled_feature(const GaussianMap& map,
                               std::span<const std::size_t> selection);

/// Map binary format: magic "G3DM", u32 LE version=1, u32 LE count, then
/// count records of 15 f32 LE (mu[3], scale[3], quat wxyz[4], opacity,
/// color[3], semantic). load(save(m)) is bit-exact.
void save_map(const GaussianMap& map, const std::filesystem::path& path);
GaussianMap load_map(const std::filesystem::path& path);

}  // namespace gsmap
