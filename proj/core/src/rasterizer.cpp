#include "gsmap/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gsmap {

void RenderConfig::validate() const {
  if (tile_size < 1) throw input_error("RenderConfig: tile_size must be >= 1");
  if (!(alpha_cull > 0.0 && alpha_cull < 1.0))
    throw input_error("RenderConfig: alpha_cull must be in (0,1)");
  if (!(footprint_sigma > 0.0))
    throw input_error("RenderConfig: footprint_sigma must be > 0");
  if (threads < 1) throw input_error("RenderConfig: threads must be >= 1");
}

std::vector<GaussianValues> lift(const GaussianMap& map) {
  std::vector<GaussianValues> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const Gaussian& g = map.gaussians[i];
    out[i].mu = g.mu.cast<double>();
    out[i].scale = g.scale.cast<double>();
    out[i].quat = g.quat.cast<double>();
    out[i].opacity = g.opacity;
    out[i].color = g.color.cast<double>();
    out[i].semantic = g.semantic;
  }
  return out;
}

Gaussian lower(const GaussianValues& v) {
  Gaussian g;
  g.mu = v.mu.cast<float>();
  g.scale = v.scale.cast<float>();
  g.quat = (v.quat / v.quat.norm()).cast<float>();
  g.quat /= g.quat.norm();  // renormalize in f32 so the stored invariant holds
  g.opacity = static_cast<float>(std::clamp(v.opacity, 0.0, 1.0));
  g.color = v.color.cwiseMax(0.0).cwiseMin(1.0).cast<float>();
  g.semantic = static_cast<float>(v.semantic);
  return g;
}

namespace {

/// Binning uses the larger of the configured footprint and the radius at
/// which a fully opaque splat decays to alpha_cull, so no pixel whose
/// contribution survives the cull test can land outside its tiles.
double bin_sigma(const RenderConfig& cfg) {
  return std::max(cfg.footprint_sigma, std::sqrt(2.0 * std::log(1.0 / cfg.alpha_cull)));
}

}  // namespace

std::optional<SplattedGaussian> splat(const GaussianValues& g, std::size_t index,
                                      const CameraIntrinsics& intr,
                                      const Pose& pose, const RenderConfig& cfg) {
  const Vec3d p = pose.to_camera(g.mu);
  if (p.z() <= cfg.near_plane) return std::nullopt;

  SplattedGaussian s;
  s.index = index;
  s.z = p.z();
  s.mu2d = Vec2d(intr.fx * p.x() / p.z() + intr.cu,
                 intr.fy * p.y() / p.z() + intr.cv);
  s.opacity = g.opacity;
  s.color = g.color;
  s.semantic = g.semantic;

  const Mat3d sigma_world = covariance_from(g.scale, g.quat);
  const Mat3d w = pose.rotation.transpose();  // camera-from-world rotation
  const Mat3d sigma_cam = w * sigma_world * w.transpose();

  // EWA Jacobian with the usual frustum-ratio clamp: grazing splats far
  // outside the view otherwise blow up the linearization and smear across
  // the whole image.
  const double rz = 1.0 / p.z();
  const double rz2 = rz * rz;
  const double lim_x = 1.3 * (0.5 * intr.width / intr.fx);
  const double lim_y = 1.3 * (0.5 * intr.height / intr.fy);
  const double tx = std::clamp(p.x() * rz, -lim_x, lim_x) * p.z();
  const double ty = std::clamp(p.y() * rz, -lim_y, lim_y) * p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << intr.fx * rz, 0.0, -intr.fx * tx * rz2,
       0.0, intr.fy * rz, -intr.fy * ty * rz2;
  s.cov2d = j * sigma_cam * j.transpose();
  s.cov2d(0, 0) += kBlurFloor;
  s.cov2d(1, 1) += kBlurFloor;

  // Largest eigenvalue of the symmetric 2x2.
  const double mid = 0.5 * (s.cov2d(0, 0) + s.cov2d(1, 1));
  const double det = s.cov2d(0, 0) * s.cov2d(1, 1) - s.cov2d(0, 1) * s.cov2d(0, 1);
  const double disc = std::sqrt(std::max(mid * mid - det, 0.0));
  const double lam_max = mid + disc;
  const double radius = bin_sigma(cfg) * std::sqrt(lam_max);

  if (s.mu2d.x() + radius < 0.0 || s.mu2d.x() - radius > intr.width - 1 ||
      s.mu2d.y() + radius < 0.0 || s.mu2d.y() - radius > intr.height - 1)
    return std::nullopt;

  const double inv_det = 1.0 / det;
  s.conic << s.cov2d(1, 1) * inv_det, -s.cov2d(0, 1) * inv_det,
             -s.cov2d(0, 1) * inv_det, s.cov2d(0, 0) * inv_det;
  return s;
}

double alpha_at(const SplattedGaussian& s, const Vec2d& pixel) {
  const Vec2d d = pixel - s.mu2d;
  const double g = s.conic(0, 0) * d.x() * d.x() +
                   2.0 * s.conic(0, 1) * d.x() * d.y() +
                   s.conic(1, 1) * d.y() * d.y();
  if (g < 0.0) return 0.0;
  return std::min(s.opacity * std::exp(-0.5 * g), 0.999);
}

FramePrep prepare_frame(std::span<const GaussianValues> values,
                        const CameraIntrinsics& intr, const Pose& pose,
                        const RenderConfig& cfg) {
  cfg.validate();
  FramePrep prep;
  prep.tile_size = cfg.tile_size;
  prep.tiles_x = (intr.width + cfg.tile_size - 1) / cfg.tile_size;
  prep.tiles_y = (intr.height + cfg.tile_size - 1) / cfg.tile_size;
  prep.tile_lists.resize(static_cast<std::size_t>(prep.tiles_x) * prep.tiles_y);

  prep.splats.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto s = splat(values[i], i, intr, pose, cfg);
    if (s) prep.splats.push_back(std::move(*s));
  }
  std::sort(prep.splats.begin(), prep.splats.end(),
            [](const SplattedGaussian& a, const SplattedGaussian& b) {
              if (a.z != b.z) return a.z < b.z;
              return a.index < b.index;
            });

  const double bs = bin_sigma(cfg);
  for (uint32_t si = 0; si < prep.splats.size(); ++si) {
    const SplattedGaussian& s = prep.splats[si];
    const double mid = 0.5 * (s.cov2d(0, 0) + s.cov2d(1, 1));
    const double det = s.cov2d(0, 0) * s.cov2d(1, 1) - s.cov2d(0, 1) * s.cov2d(0, 1);
    const double disc = std::sqrt(std::max(mid * mid - det, 0.0));
    const double radius = bs * std::sqrt(mid + disc);

    const int x0 = std::clamp(static_cast<int>(std::floor((s.mu2d.x() - radius) / cfg.tile_size)), 0, prep.tiles_x - 1);
    const int x1 = std::clamp(static_cast<int>(std::floor((s.mu2d.x() + radius) / cfg.tile_size)), 0, prep.tiles_x - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor((s.mu2d.y() - radius) / cfg.tile_size)), 0, prep.tiles_y - 1);
    const int y1 = std::clamp(static_cast<int>(std::floor((s.mu2d.y() + radius) / cfg.tile_size)), 0, prep.tiles_y - 1);
    for (int ty = y0; ty <= y1; ++ty)
      for (int tx = x0; tx <= x1; ++tx)
        prep.tile_lists[static_cast<std::size_t>(ty) * prep.tiles_x + tx].push_back(si);
  }
  return prep;
}

RenderedFrame composite_frame(const FramePrep& prep, const CameraIntrinsics& intr,
                              const RenderConfig& cfg) {
  RenderedFrame out(intr.width, intr.height);

  parallel_for(prep.tile_lists.size(), cfg.threads, [&](std::size_t t) {
    const int tx = static_cast<int>(t) % prep.tiles_x;
    const int ty = static_cast<int>(t) / prep.tiles_x;
    const int px0 = tx * prep.tile_size;
    const int py0 = ty * prep.tile_size;
    const int px1 = std::min(px0 + prep.tile_size, intr.width);
    const int py1 = std::min(py0 + prep.tile_size, intr.height);
    const auto& list = prep.tile_lists[t];

    for (int y = py0; y < py1; ++y)
      for (int x = px0; x < px1; ++x) {
        const Vec2d px(x, y);
        double transmittance = 1.0;
        Vec3d rgb = Vec3d::Zero();
        double depth = 0.0, sem = 0.0;
        for (uint32_t si : list) {
          const SplattedGaussian& s = prep.splats[si];
          const double a = alpha_at(s, px);
          if (a < cfg.alpha_cull) continue;
          const double w = a * transmittance;
          rgb += w * s.color;
          depth += w * s.z;
          sem += w * s.semantic;
          transmittance *= 1.0 - a;
          if (cfg.early_stop > 0.0 && transmittance < cfg.early_stop) break;
        }
        rgb += transmittance * cfg.background;
        out.rgb.at(y, x, 0) = rgb.x();
        out.rgb.at(y, x, 1) = rgb.y();
        out.rgb.at(y, x, 2) = rgb.z();
        out.depth.at(y, x) = depth;
        out.semantic.at(y, x) = sem;
        out.alpha_acc.at(y, x) = 1.0 - transmittance;
      }
  });
  return out;
}

RenderedFrame render_values(std::span<const GaussianValues> values,
                            const CameraIntrinsics& intr, const Pose& pose,
                            const RenderConfig& cfg) {
  const FramePrep prep = prepare_frame(values, intr, pose, cfg);
  return composite_frame(prep, intr, cfg);
}

RenderedFrame render(const GaussianMap& map, const CameraIntrinsics& intr,
                     const Pose& pose, const RenderConfig& cfg) {
  const auto values = lift(map);
  return render_values(values, intr, pose, cfg);
}

RenderedFrame render_reference(const GaussianMap& map, const CameraIntrinsics& intr,
                               const Pose& pose, const RenderConfig& cfg) {
  cfg.validate();
  const auto values = lift(map);

  std::vector<SplattedGaussian> splats;
  splats.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto s = splat(values[i], i, intr, pose, cfg);
    if (s) splats.push_back(std::move(*s));
  }
  std::sort(splats.begin(), splats.end(),
            [](const SplattedGaussian& a, const SplattedGaussian& b) {
              if (a.z != b.z) return a.z < b.z;
              return a.index < b.index;
            });

  RenderedFrame out(intr.width, intr.height);
  for (int y = 0; y < intr.height; ++y)
    for (int x = 0; x < intr.width; ++x) {
      const Vec2d px(x, y);
      double transmittance = 1.0;
      Vec3d rgb = Vec3d::Zero();
      double depth = 0.0, sem = 0.0;
      for (const SplattedGaussian& s : splats) {
        const double a = alpha_at(s, px);
        if (a < cfg.alpha_cull) continue;
        const double w = a * transmittance;
        rgb += w * s.color;
        depth += w * s.z;
        sem += w * s.semantic;
        transmittance *= 1.0 - a;
      }
      rgb += transmittance * cfg.background;
      out.rgb.at(y, x, 0) = rgb.x();
      out.rgb.at(y, x, 1) = rgb.y();
      out.rgb.at(y, x, 2) = rgb.z();
      out.depth.at(y, x) = depth;
      out.semantic.at(y, x) = sem;
      out.alpha_acc.at(y, x) = 1.0 - transmittance;
    }
  return out;
}

std::vector<int32_t> render_dominant_index(std::span<const GaussianValues> values,
                                           const CameraIntrinsics& intr,
                                           const Pose& pose,
                                           const RenderConfig& cfg) {
  const FramePrep prep = prepare_frame(values, intr, pose, cfg);
  std::vector<int32_t> out(static_cast<std::size_t>(intr.width) * intr.height, -1);

  parallel_for(prep.tile_lists.size(), cfg.threads, [&](std::size_t t) {
    const int tx = static_cast<int>(t) % prep.tiles_x;
    const int ty = static_cast<int>(t) / prep.tiles_x;
    const int px0 = tx * cfg.tile_size;
    const int py0 = ty * cfg.tile_size;
    const int px1 = std::min(px0 + cfg.tile_size, intr.width);
    const int py1 = std::min(py0 + cfg.tile_size, intr.height);
    const auto& list = prep.tile_lists[t];

    for (int y = py0; y < py1; ++y)
      for (int x = px0; x < px1; ++x) {
        const Vec2d px(x, y);
        double transmittance = 1.0;
        double best_w = 0.0;
        int32_t best = -1;
        for (uint32_t si : list) {
          const SplattedGaussian& s = prep.splats[si];
          const double a = alpha_at(s, px);
          if (a < cfg.alpha_cull) continue;
          const double w = a * transmittance;
          if (w > best_w) {  // strict: ties keep the nearer splat
            best_w = w;
            best = static_cast<int32_t>(s.index);
          }
          transmittance *= 1.0 - a;
          if (cfg.early_stop > 0.0 && transmittance < cfg.early_stop) break;
        }
        out[static_cast<std::size_t>(y) * intr.width + x] = best;
      }
  });
  return out;
}

}  // namespace gsmap
