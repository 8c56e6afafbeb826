#pragma once

#include <span>
#include <string>
#include <vector>

#include "gsmap/rasterizer.hpp"

namespace gsmap {

struct LossWeights {
  double lambda_ssim = 0.2;  // D-SSIM mix in the color loss
  double w_depth = 0.5;
  double w_sem = 0.5;

  void validate() const;
};

struct FitConfig {
  int iterations = 15;
  double lr_mu = 1.6e-3;
  double lr_log_scale = 5e-3;
  double lr_quat = 1e-3;
  double lr_opacity = 5e-2;   // logit domain
  double lr_color = 2.5e-2;   // logit domain
  double lr_semantic = 1e-2;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  int ssim_window = 11;
  RenderConfig render;

  void validate() const;
};

struct IterationStats {
  int iteration = 0;
  double loss_rgb = 0, loss_depth = 0, loss_sem = 0, total = 0;
  double psnr = 0;
};

struct FitReport {
  std::vector<IterationStats> iterations;
  double final_psnr = 0;
  double final_depth_mae = 0;     // meters, over valid target pixels
  double final_sem_mae = 0;
  double wall_clock_seconds = 0;
  std::vector<int> lr_halved_at;  // iterations where the divergence guard fired

  /// One record per iteration plus the summary fields, as JSON.
  std::string to_json() const;
};

/// One observation the map is fitted against. depth/semantic are optional
/// (empty image disables that term); semantic_mask marks labeled pixels.
struct TargetFrame {
  CameraIntrinsics intrinsics;
  Pose pose;
  Image rgb;            // H x W x 3
  Image depth;          // H x W, 0 = invalid; empty = no depth supervision
  Image semantic;       // H x W codes; empty = no semantic supervision
  Image semantic_mask;  // H x W, nonzero = labeled
};

/// Mean local SSIM with a Gaussian window (sigma 1.5), C1=0.01^2,
/// C2=0.03^2, computed over the valid (unpadded) region, averaged across
/// channels.
double ssim(const Image& a, const Image& b, int window = 11);

/// (1 - lambda) * mean|a-b| + lambda * (1 - SSIM(a,b)).
double loss_rgb(const Image& rendered, const Image& target, double lambda_ssim,
                int window = 11);

struct MaskedLoss {
  double value = 0;
  bool no_valid_pixels = false;  // warning flag: loss forced to 0
};

/// Mean absolute error over pixels with target depth > 0.
MaskedLoss loss_depth(const Image& rendered_depth, const Image& target_depth);
/// Mean absolute error over pixels with a nonzero mask.
MaskedLoss loss_sem(const Image& rendered_sem, const Image& target_sem,
                    const Image& mask);

/// Optimization-domain view of one Gaussian: positivity and range
/// constraints are carried by the parameterization (log scale, logits).
struct ParamBlock {
  Vec3d mu = Vec3d::Zero();
  Vec3d log_scale = Vec3d::Zero();
  Vec4d quat{1, 0, 0, 0};
  double opacity_logit = 0;
  Vec3d color_logit = Vec3d::Zero();
  double semantic = 0;
};

using ParamSet = std::vector<ParamBlock>;

ParamSet params_from_map(const GaussianMap& map);
GaussianValues values_from_params(const ParamBlock& p);
std::vector<GaussianValues> values_from_params(const ParamSet& p);
/// Writes optimized parameters back into f32 storage, keeping map metadata.
GaussianMap map_from_params(const ParamSet& p, const GaussianMap& like);

struct LossBreakdown {
  double rgb = 0, depth = 0, sem = 0;
  double total = 0;  // rgb + w_depth*depth + w_sem*sem, exactly
  double mean_psnr = 0;
  bool depth_warning = false, sem_warning = false;
};

/// Total loss across frames (per-term means over frames).
LossBreakdown total_loss(const ParamSet& params,
                         std::span<const TargetFrame> frames,
                         const LossWeights& weights, const FitConfig& cfg);

/// Total loss plus analytic d(total)/d(param) for every Gaussian, in the
/// same layout as ParamBlock. Quaternion gradients come out tangent to the
/// unit sphere. Deterministic for any cfg.render.threads.
LossBreakdown loss_and_gradients(const ParamSet& params,
                                 std::span<const TargetFrame> frames,
                                 const LossWeights& weights, const FitConfig& cfg,
                                 ParamSet& grads);

/// Gradient record for a stored map (lifts to the optimization domain
/// first).
ParamSet backward(const GaussianMap& map, std::span<const TargetFrame> frames,
                  const LossWeights& weights, const FitConfig& cfg);

/// Full-batch Adam over all frames for cfg.iterations steps. Parameters
/// are re-projected to their valid domains after every step. If the loss
/// exceeds 10x its initial value all learning rates are halved and the
/// event is recorded.
std::pair<GaussianMap, FitReport> fit_map(const GaussianMap& map,
                                          std::span<const TargetFrame> frames,
                                          const FitConfig& cfg,
                                          const LossWeights& weights);

}  // namespace gsmap
