#pragma once

#include <optional>
#include <span>
#include <vector>

#include "gsmap/gaussian_map.hpp"
#include "gsmap/geometry.hpp"
#include "gsmap/image.hpp"

namespace gsmap {

/// f64 working copy of one Gaussian. Rendering and optimization run on
/// these; the f32 map is lifted once per pass.
struct GaussianValues {
  Vec3d mu = Vec3d::Zero();
  Vec3d scale = Vec3d::Ones();
  Vec4d quat{1, 0, 0, 0};
  double opacity = 0.5;
  Vec3d color = Vec3d::Zero();
  double semantic = 0.0;
};

std::vector<GaussianValues> lift(const GaussianMap& map);
Gaussian lower(const GaussianValues& v);

struct RenderConfig {
  int tile_size = 16;               // pixels
  double alpha_cull = 1.0 / 255.0;  // contributions below this are skipped
  double footprint_sigma = 3.0;     // splat extent multiplier for binning
  Vec3d background = Vec3d::Zero();
  double near_plane = kNearPlane;   // meters
  double early_stop = 1e-4;         // stop compositing below this transmittance; 0 disables
  int threads = 1;

  void validate() const;
};

/// Anti-aliasing floor added to the diagonal of every projected 2x2
/// covariance; also guarantees invertibility.
inline constexpr double kBlurFloor = 0.3;  // px^2

struct SplattedGaussian {
  std::size_t index = 0;  // source Gaussian id
  Vec2d mu2d = Vec2d::Zero();
  Mat2d cov2d = Mat2d::Identity();  // px^2, blur floor included
  Mat2d conic = Mat2d::Identity();  // cov2d^-1, cached
  double z = 0;                     // camera-frame depth, meters
  double opacity = 0;
  Vec3d color = Vec3d::Zero();
  double semantic = 0;
};

/// EWA first-order projection of one Gaussian: mu2d from the pinhole
/// projection, cov2d = J W Sigma W^T J^T + blur floor. nullopt when the
/// center is behind the near plane or the footprint misses the image.
std::optional<SplattedGaussian> splat(const GaussianValues& g, std::size_t index,
                                      const CameraIntrinsics& intr,
                                      const Pose& pose, const RenderConfig& cfg);

inline std::optional<SplattedGaussian> splat(const Gaussian& g, std::size_t index,
                                             const CameraIntrinsics& intr,
                                             const Pose& pose,
                                             const RenderConfig& cfg) {
  GaussianValues v;
  v.mu = g.mu.cast<double>();
  v.scale = g.scale.cast<double>();
  v.quat = g.quat.cast<double>();
  v.opacity = g.opacity;
  v.color = g.color.cast<double>();
  v.semantic = g.semantic;
  return splat(v, index, intr, pose, cfg);
}

/// Opacity-modulated Gaussian falloff at a pixel, clamped to [0, 0.999]
/// so transmittance stays strictly positive.
double alpha_at(const SplattedGaussian& s, const Vec2d& pixel);

struct RenderedFrame {
  Image rgb;        // H x W x 3, [0,1]
  Image depth;      // H x W, meters (0 where nothing rendered)
  Image semantic;   // H x W
  Image alpha_acc;  // H x W, [0,1]

  RenderedFrame() = default;
  RenderedFrame(int width, int height)
      : rgb(width, height, 3), depth(width, height, 1),
        semantic(width, height, 1), alpha_acc(width, height, 1) {}
};

/// Splats culled+projected and binned into tiles, in global (z, index)
/// depth order. Shared by the forward renderer and the gradient pass.
struct FramePrep {
  std::vector<SplattedGaussian> splats;  // depth-sorted
  int tiles_x = 0, tiles_y = 0;
  int tile_size = 0;
  std::vector<std::vector<uint32_t>> tile_lists;  // ascending => depth order
};

FramePrep prepare_frame(std::span<const GaussianValues> values,
                        const CameraIntrinsics& intr, const Pose& pose,
                        const RenderConfig& cfg);

/// Front-to-back compositing of an already prepared frame.
RenderedFrame composite_frame(const FramePrep& prep, const CameraIntrinsics& intr,
                              const RenderConfig& cfg);

/// Tile-based front-to-back compositing of color, depth, and semantic
/// channels. Deterministic for any thread count.
RenderedFrame render(const GaussianMap& map, const CameraIntrinsics& intr,
                     const Pose& pose, const RenderConfig& cfg);
RenderedFrame render_values(std::span<const GaussianValues> values,
                            const CameraIntrinsics& intr, const Pose& pose,
                            const RenderConfig& cfg);

/// Brute-force oracle: every pixel visits every splat in depth order, no
/// tiling, no early stop.
RenderedFrame render_reference(const GaussianMap& map, const CameraIntrinsics& intr,
                               const Pose& pose, const RenderConfig& cfg);

/// Per-pixel source index of the largest-weight splat, -1 where no splat
/// contributed. Used to derive ground-truth instance rasters.
std::vector<int32_t> render_dominant_index(std::span<const GaussianValues> values,
                                           const CameraIntrinsics& intr,
                                           const Pose& pose,
                                           const RenderConfig& cfg);

}  // namespace gsmap
