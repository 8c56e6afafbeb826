#include "gsmap/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace gsmap {

void LossWeights::validate() const {
  if (!(lambda_ssim >= 0.0 && lambda_ssim <= 1.0))
    throw input_error("LossWeights: lambda_ssim outside [0,1]");
  if (!(w_depth >= 0.0) || !(w_sem >= 0.0))
    throw input_error("LossWeights: negative term weight");
}

void FitConfig::validate() const {
  if (iterations < 1) throw input_error("FitConfig: iterations must be >= 1");
  for (double lr : {lr_mu, lr_log_scale, lr_quat, lr_opacity, lr_color, lr_semantic})
    if (!(lr > 0.0)) throw input_error("FitConfig: learning rates must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw input_error("FitConfig: betas must be in [0,1)");
  if (ssim_window < 3 || ssim_window % 2 == 0)
    throw input_error("FitConfig: ssim_window must be odd and >= 3");
  render.validate();
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

namespace {

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(window);
  const double mid = 0.5 * (window - 1);
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    const double d = i - mid;
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Valid-mode separable convolution: (h-win+1) x (w-win+1) output.
std::vector<double> conv_valid(const std::vector<double>& src, int w, int h,
                               const std::vector<double>& kernel) {
  const int win = static_cast<int>(kernel.size());
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < win; ++k) s += kernel[k] * src[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < win; ++k) s += kernel[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

/// Transpose of conv_valid: scatters a (h-win+1) x (w-win+1) field back to
/// w x h through the same kernel.
std::vector<double> conv_valid_transpose(const std::vector<double>& src, int w,
                                         int h, const std::vector<double>& kernel) {
  const int win = static_cast<int>(kernel.size());
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = src[static_cast<std::size_t>(y) * ow + x];
      if (v == 0.0) continue;
      for (int k = 0; k < win; ++k)
        tmp[static_cast<std::size_t>(y + k) * ow + x] += kernel[k] * v;
    }
  std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      if (v == 0.0) continue;
      for (int k = 0; k < win; ++k)
        out[static_cast<std::size_t>(y) * w + x + k] += kernel[k] * v;
    }
  return out;
}

std::vector<double> extract_channel(const Image& img, int c) {
  std::vector<double> out(static_cast<std::size_t>(img.width()) * img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      out[static_cast<std::size_t>(y) * img.width() + x] = img.at(y, x, c);
  return out;
}

/// Mean SSIM; when grad_a is non-null it receives d(mean SSIM)/d(a).
double ssim_impl(const Image& a, const Image& b, int window, Image* grad_a) {
  if (!a.same_shape(b)) throw input_error("ssim: shape mismatch");
  if (window < 3 || window % 2 == 0)
    throw input_error("ssim: window must be odd and >= 3");
  if (window > a.width() || window > a.height())
    throw input_error("ssim: window larger than image");

  const int w = a.width(), h = a.height();
  const int ow = w - window + 1, oh = h - window + 1;
  const std::vector<double> kernel = gaussian_kernel(window, 1.5);
  const std::size_t n_valid =
      static_cast<std::size_t>(ow) * oh * a.channels();

  if (grad_a) *grad_a = Image(w, h, a.channels(), 0.0);

  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    const std::vector<double> ca = extract_channel(a, c);
    const std::vector<double> cb = extract_channel(b, c);
    std::vector<double> caa(ca.size()), cbb(ca.size()), cab(ca.size());
    for (std::size_t i = 0; i < ca.size(); ++i) {
      caa[i] = ca[i] * ca[i];
      cbb[i] = cb[i] * cb[i];
      cab[i] = ca[i] * cb[i];
    }
    const auto ua = conv_valid(ca, w, h, kernel);
    const auto ub = conv_valid(cb, w, h, kernel);
    const auto uaa = conv_valid(caa, w, h, kernel);
    const auto ubb = conv_valid(cbb, w, h, kernel);
    const auto uab = conv_valid(cab, w, h, kernel);

    std::vector<double> dua, duaa, duab;
    if (grad_a) {
      dua.assign(ua.size(), 0.0);
      duaa.assign(ua.size(), 0.0);
      duab.assign(ua.size(), 0.0);
    }

    for (std::size_t i = 0; i < ua.size(); ++i) {
      const double mx = ua[i], my = ub[i];
      const double sx = uaa[i] - mx * mx;
      const double sy = ubb[i] - my * my;
      const double sxy = uab[i] - mx * my;
      const double a1 = 2.0 * mx * my + kSsimC1;
      const double a2 = 2.0 * sxy + kSsimC2;
      const double b1 = mx * mx + my * my + kSsimC1;
      const double b2 = sx + sy + kSsimC2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (grad_a) {
        if (mx == my && uaa[i] == ubb[i] && uaa[i] == uab[i]) {
          // Identical window content: the true derivative contribution is
          // zero; writing it out avoids floating-point residue that would
          // otherwise nudge a converged optimizer off its fixed point.
          dua[i] = duaa[i] = duab[i] = 0.0;
        } else {
          const double ds_dmx = (2.0 * my * a2) / (b1 * b2) - s * (2.0 * mx) / b1;
          const double ds_dsx = -s / b2;
          const double ds_dsxy = (2.0 * a1) / (b1 * b2);
          dua[i] = ds_dmx - 2.0 * mx * ds_dsx - my * ds_dsxy;
          duaa[i] = ds_dsx;
          duab[i] = ds_dsxy;
        }
      }
    }

    if (grad_a) {
      const auto t1 = conv_valid_transpose(dua, w, h, kernel);
      const auto t2 = conv_valid_transpose(duaa, w, h, kernel);
      const auto t3 = conv_valid_transpose(duab, w, h, kernel);
      const double inv_n = 1.0 / static_cast<double>(n_valid);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          grad_a->at(y, x, c) =
              (t1[i] + 2.0 * ca[i] * t2[i] + cb[i] * t3[i]) * inv_n;
        }
    }
  }
  return total / static_cast<double>(n_valid);
}

}  // namespace

double ssim(const Image& a, const Image& b, int window) {
  return ssim_impl(a, b, window, nullptr);
}

double loss_rgb(const Image& rendered, const Image& target, double lambda_ssim,
                int window) {
  if (!rendered.same_shape(target)) throw input_error("loss_rgb: shape mismatch");
  double l1 = 0.0;
  for (std::size_t i = 0; i < rendered.size(); ++i)
    l1 += std::abs(rendered.data()[i] - target.data()[i]);
  l1 /= static_cast<double>(rendered.size());
  if (lambda_ssim == 0.0) return l1;
  return (1.0 - lambda_ssim) * l1 +
         lambda_ssim * (1.0 - ssim(rendered, target, window));
}

MaskedLoss loss_depth(const Image& rendered_depth, const Image& target_depth) {
  if (!rendered_depth.same_shape(target_depth))
    throw input_error("loss_depth: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < target_depth.size(); ++i) {
    if (!(target_depth.data()[i] > 0.0)) continue;
    sum += std::abs(rendered_depth.data()[i] - target_depth.data()[i]);
    ++n;
  }
  if (n == 0) return {0.0, true};
  return {sum / static_cast<double>(n), false};
}

MaskedLoss loss_sem(const Image& rendered_sem, const Image& target_sem,
                    const Image& mask) {
  if (!rendered_sem.same_shape(target_sem) || !rendered_sem.same_shape(mask))
    throw input_error("loss_sem: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < target_sem.size(); ++i) {
    if (!(mask.data()[i] != 0.0)) continue;
    sum += std::abs(rendered_sem.data()[i] - target_sem.data()[i]);
    ++n;
  }
  if (n == 0) return {0.0, true};
  return {sum / static_cast<double>(n), false};
}

// ---------------------------------------------------------------------------
// Parameterization
// ---------------------------------------------------------------------------

ParamSet params_from_map(const GaussianMap& map) {
  ParamSet out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const Gaussian& g = map.gaussians[i];
    ParamBlock& p = out[i];
    p.mu = g.mu.cast<double>();
    p.log_scale = g.scale.cast<double>().array().log();
    p.quat = g.quat.cast<double>();
    p.quat /= p.quat.norm();
    p.opacity_logit = logit(g.opacity);
    p.color_logit = Vec3d(logit(g.color.x()), logit(g.color.y()), logit(g.color.z()));
    p.semantic = g.semantic;
  }
  return out;
}

GaussianValues values_from_params(const ParamBlock& p) {
  GaussianValues v;
  v.mu = p.mu;
  v.scale = p.log_scale.array().exp();
  v.quat = p.quat / p.quat.norm();
  v.opacity = sigmoid(p.opacity_logit);
  v.color = Vec3d(sigmoid(p.color_logit.x()), sigmoid(p.color_logit.y()),
                  sigmoid(p.color_logit.z()));
  v.semantic = p.semantic;
  return v;
}

std::vector<GaussianValues> values_from_params(const ParamSet& p) {
  std::vector<GaussianValues> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = values_from_params(p[i]);
  return out;
}

GaussianMap map_from_params(const ParamSet& p, const GaussianMap& like) {
  GaussianMap out;
  out.frame = like.frame;
  out.frame_node = like.frame_node;
  out.step = like.step;
  out.gaussians.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    out.gaussians[i] = lower(values_from_params(p[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace {

/// Accumulated gradients w.r.t. one splat's 2D quantities.
struct Grad2D {
  Vec2d mu2d = Vec2d::Zero();
  double conic_xx = 0, conic_xy = 0, conic_yy = 0;  // full-matrix convention
  double opacity = 0;
  Vec3d color = Vec3d::Zero();
  double z = 0;
  double semantic = 0;
  bool touched = false;

  void add(const Grad2D& o) {
    mu2d += o.mu2d;
    conic_xx += o.conic_xx;
    conic_xy += o.conic_xy;
    conic_yy += o.conic_yy;
    opacity += o.opacity;
    color += o.color;
    z += o.z;
    semantic += o.semantic;
    touched = true;
  }
};

struct PixelContribution {
  uint32_t pos;  // index into the tile list
  double alpha;
};

/// Per-pixel loss derivatives for one frame, already scaled by any frame
/// averaging and term weights.
struct OutputGrads {
  Image d_rgb;   // H x W x 3
  Image d_depth; // H x W (zeros when depth unsupervised)
  Image d_sem;   // H x W
  bool has_depth = false, has_sem = false;
};

/// Tile-parallel backward through the compositing. Per-tile results are
/// reduced serially in tile order, so output is worker-count independent.
void backward_frame_2d(const FramePrep& prep, const CameraIntrinsics& intr,
                       const RenderConfig& cfg, const OutputGrads& og,
                       std::vector<Grad2D>& splat_grads) {
  splat_grads.assign(prep.splats.size(), Grad2D{});
  const std::size_t n_tiles = prep.tile_lists.size();
  std::vector<std::vector<std::pair<uint32_t, Grad2D>>> tile_out(n_tiles);

  parallel_for(n_tiles, cfg.threads, [&](std::size_t t) {
    const auto& list = prep.tile_lists[t];
    if (list.empty()) return;
    const int tx = static_cast<int>(t) % prep.tiles_x;
    const int ty = static_cast<int>(t) / prep.tiles_x;
    const int px0 = tx * prep.tile_size;
    const int py0 = ty * prep.tile_size;
    const int px1 = std::min(px0 + prep.tile_size, intr.width);
    const int py1 = std::min(py0 + prep.tile_size, intr.height);

    std::vector<Grad2D> local(list.size());
    std::vector<PixelContribution> contribs;
    contribs.reserve(list.size());

    for (int y = py0; y < py1; ++y)
      for (int x = px0; x < px1; ++x) {
        const Vec2d px(x, y);
        // Replay the forward compositing for this pixel.
        contribs.clear();
        double transmittance = 1.0;
        for (uint32_t pos = 0; pos < list.size(); ++pos) {
          const SplattedGaussian& s = prep.splats[list[pos]];
          const double a = alpha_at(s, px);
          if (a < cfg.alpha_cull) continue;
          contribs.push_back({pos, a});
          transmittance *= 1.0 - a;
          if (cfg.early_stop > 0.0 && transmittance < cfg.early_stop) break;
        }
        if (contribs.empty()) continue;
        const double t_final = transmittance;

        const Vec3d d_rgb(og.d_rgb.at(y, x, 0), og.d_rgb.at(y, x, 1),
                          og.d_rgb.at(y, x, 2));
        const double d_depth = og.has_depth ? og.d_depth.at(y, x) : 0.0;
        const double d_sem = og.has_sem ? og.d_sem.at(y, x) : 0.0;
        const double bg_term = cfg.background.dot(d_rgb);

        // Back-to-front: buffers hold the summed contributions of splats
        // behind the current one.
        Vec3d buf_rgb = Vec3d::Zero();
        double buf_d = 0.0, buf_s = 0.0;
        double t_run = t_final;
        for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
          const SplattedGaussian& s = prep.splats[list[it->pos]];
          const double a = it->alpha;
          const double ra = 1.0 / (1.0 - a);
          const double t_prev = t_run * ra;
          const double w = a * t_prev;
          Grad2D& gl = local[it->pos];
          gl.touched = true;

          gl.color += w * d_rgb;
          gl.z += w * d_depth;
          gl.semantic += w * d_sem;

          double v_alpha = (s.color * t_prev - buf_rgb * ra).dot(d_rgb) +
                           (s.z * t_prev - buf_d * ra) * d_depth +
                           (s.semantic * t_prev - buf_s * ra) * d_sem -
                           t_final * ra * bg_term;

          buf_rgb += s.color * w;
          buf_d += s.z * w;
          buf_s += s.semantic * w;
          t_run = t_prev;

          const Vec2d d = Vec2d(x, y) - s.mu2d;
          const double g = s.conic(0, 0) * d.x() * d.x() +
                           2.0 * s.conic(0, 1) * d.x() * d.y() +
                           s.conic(1, 1) * d.y() * d.y();
          const double e = std::exp(-0.5 * g);
          const double a_pre = s.opacity * e;
          if (a_pre >= 0.999) continue;  // clamp active: no upstream gradient

          gl.opacity += e * v_alpha;
          const double v_g = -0.5 * a_pre * v_alpha;
          gl.conic_xx += v_g * d.x() * d.x();
          gl.conic_xy += v_g * d.x() * d.y();
          gl.conic_yy += v_g * d.y() * d.y();
          // G = d^T conic d with d = px - mu2d, so dG/dmu2d = -2 conic d.
          gl.mu2d += v_g * (-2.0) * (s.conic * d);
        }
      }

    auto& out = tile_out[t];
    for (uint32_t pos = 0; pos < list.size(); ++pos)
      if (local[pos].touched) out.emplace_back(list[pos], local[pos]);
  });

  for (std::size_t t = 0; t < n_tiles; ++t)
    for (const auto& [si, g] : tile_out[t]) splat_grads[si].add(g);
}

/// dR/dq for a unit quaternion (w,x,y,z), one 3x3 per component.
void rotation_quat_derivatives(const Vec4d& q, Mat3d dr[4]) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  dr[0] << 0, -2 * z, 2 * y,
           2 * z, 0, -2 * x,
           -2 * y, 2 * x, 0;
  dr[1] << 0, 2 * y, 2 * z,
           2 * y, -4 * x, -2 * w,
           2 * z, 2 * w, -4 * x;
  dr[2] << -4 * y, 2 * x, 2 * w,
           2 * x, 0, 2 * z,
           -2 * w, 2 * z, -4 * y;
  dr[3] << -4 * z, -2 * w, 2 * x,
           2 * w, -4 * z, 2 * y,
           2 * x, 2 * y, 0;
}

/// Chains one splat's 2D gradients to its optimization-domain parameters.
void chain_to_params(const SplattedGaussian& s, const Grad2D& g2,
                     const ParamBlock& pb, const CameraIntrinsics& intr,
                     const Pose& pose, ParamBlock& grad) {
  const Mat3d rcw = pose.rotation.transpose();
  const Vec3d p = rcw * (pb.mu - pose.translation);
  const double rz = 1.0 / p.z(), rz2 = rz * rz;

  const double qn = pb.quat.norm();
  const Vec4d qh = pb.quat / qn;
  const Mat3d rot = quat_to_rotation(qh);
  const Vec3d scale = pb.log_scale.array().exp();
  const Mat3d m = rot * scale.asDiagonal();
  const Mat3d sigma_cam = rcw * (m * m.transpose()) * rcw.transpose();

  // Same frustum-ratio clamp as the forward splat.
  const double lim_x = 1.3 * (0.5 * intr.width / intr.fx);
  const double lim_y = 1.3 * (0.5 * intr.height / intr.fy);
  const bool in_x = std::abs(p.x() * rz) < lim_x;
  const bool in_y = std::abs(p.y() * rz) < lim_y;
  const double tx = std::clamp(p.x() * rz, -lim_x, lim_x) * p.z();
  const double ty = std::clamp(p.y() * rz, -lim_y, lim_y) * p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << intr.fx * rz, 0.0, -intr.fx * tx * rz2,
       0.0, intr.fy * rz, -intr.fy * ty * rz2;

  // conic -> cov2d (Y = X^-1  =>  dX = -Y dY Y).
  Mat2d d_conic;
  d_conic << g2.conic_xx, g2.conic_xy, g2.conic_xy, g2.conic_yy;
  const Mat2d d_cov = -s.conic * d_conic * s.conic;

  const Mat3d d_sigma_cam = j.transpose() * d_cov * j;
  const Eigen::Matrix<double, 2, 3> d_j = 2.0 * d_cov * j * sigma_cam;

  Vec3d dp = j.transpose() * g2.mu2d;
  if (in_x) dp.x() += d_j(0, 2) * (-intr.fx * rz2);
  if (in_y) dp.y() += d_j(1, 2) * (-intr.fy * rz2);
  // d(J02)/dz: inside the clamp tx tracks x (factor 2); outside tx = lim*z
  // and one power of z cancels (factor 1).
  dp.z() += d_j(0, 0) * (-intr.fx * rz2) + d_j(1, 1) * (-intr.fy * rz2) +
            d_j(0, 2) * ((in_x ? 2.0 : 1.0) * intr.fx * tx * rz2 * rz) +
            d_j(1, 2) * ((in_y ? 2.0 : 1.0) * intr.fy * ty * rz2 * rz);
  dp.z() += g2.z;

  grad.mu += pose.rotation * dp;

  const Mat3d d_sigma_world = rcw.transpose() * d_sigma_cam * rcw;
  const Mat3d d_m = 2.0 * d_sigma_world * m;
  for (int k = 0; k < 3; ++k) {
    const double ds_k = d_m.col(k).dot(rot.col(k));
    grad.log_scale[k] += ds_k * scale[k];
  }

  const Mat3d d_rot = d_m * scale.asDiagonal();
  Mat3d dr[4];
  rotation_quat_derivatives(qh, dr);
  Vec4d d_qh;
  for (int k = 0; k < 4; ++k) d_qh[k] = (d_rot.array() * dr[k].array()).sum();
  grad.quat += (d_qh - qh * qh.dot(d_qh)) / qn;

  const double op = sigmoid(pb.opacity_logit);
  grad.opacity_logit += g2.opacity * op * (1.0 - op);
  for (int c = 0; c < 3; ++c) {
    const double col = sigmoid(pb.color_logit[c]);
    grad.color_logit[c] += g2.color[c] * col * (1.0 - col);
  }
  grad.semantic += g2.semantic;
}

struct FrameEval {
  LossBreakdown bd;  // per-frame values in rgb/depth/sem fields
  double psnr_value = 0;
};

}  // namespace

static FrameEval eval_frame(const std::vector<GaussianValues>& values,
                            const TargetFrame& frame, const LossWeights& weights,
                            const FitConfig& cfg, double frame_weight,
                            const ParamSet* params, ParamSet* grads) {
  if (frame.rgb.channels() != 3 || frame.rgb.width() != frame.intrinsics.width ||
      frame.rgb.height() != frame.intrinsics.height)
    throw input_error("TargetFrame: rgb does not match intrinsics");

  FrameEval out;
  const FramePrep prep = prepare_frame(values, frame.intrinsics, frame.pose, cfg.render);
  const RenderedFrame rendered = composite_frame(prep, frame.intrinsics, cfg.render);

  const int w = frame.intrinsics.width, h = frame.intrinsics.height;
  const bool want_grads = grads != nullptr;

  // RGB: (1-lambda)*L1 + lambda*(1-SSIM).
  double l1 = 0.0;
  for (std::size_t i = 0; i < rendered.rgb.size(); ++i)
    l1 += std::abs(rendered.rgb.data()[i] - frame.rgb.data()[i]);
  l1 /= static_cast<double>(rendered.rgb.size());

  Image ssim_grad;
  double ssim_value = 0.0;
  if (weights.lambda_ssim > 0.0)
    ssim_value = ssim_impl(rendered.rgb, frame.rgb, cfg.ssim_window,
                           want_grads ? &ssim_grad : nullptr);
  out.bd.rgb = (1.0 - weights.lambda_ssim) * l1 +
               weights.lambda_ssim * (1.0 - ssim_value);
  out.psnr_value = psnr(rendered.rgb, frame.rgb);

  MaskedLoss dl{0.0, false}, sl{0.0, false};
  const bool has_depth = !frame.depth.empty();
  const bool has_sem = !frame.semantic.empty();
  if (has_depth) {
    dl = loss_depth(rendered.depth, frame.depth);
    out.bd.depth = dl.value;
    out.bd.depth_warning = dl.no_valid_pixels;
  }
  if (has_sem) {
    if (frame.semantic_mask.empty())
      throw input_error("TargetFrame: semantic target without mask");
    sl = loss_sem(rendered.semantic, frame.semantic, frame.semantic_mask);
    out.bd.sem = sl.value;
    out.bd.sem_warning = sl.no_valid_pixels;
  }

  if (!want_grads) return out;

  OutputGrads og;
  og.d_rgb = Image(w, h, 3, 0.0);
  const double l1_scale =
      frame_weight * (1.0 - weights.lambda_ssim) / static_cast<double>(rendered.rgb.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double diff = rendered.rgb.at(y, x, c) - frame.rgb.at(y, x, c);
        double d = l1_scale * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
        if (weights.lambda_ssim > 0.0)
          d -= frame_weight * weights.lambda_ssim * ssim_grad.at(y, x, c);
        og.d_rgb.at(y, x, c) = d;
      }

  if (has_depth && !dl.no_valid_pixels) {
    og.has_depth = true;
    og.d_depth = Image(w, h, 1, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < frame.depth.size(); ++i)
      if (frame.depth.data()[i] > 0.0) ++n;
    const double scale = frame_weight * weights.w_depth / static_cast<double>(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!(frame.depth.at(y, x) > 0.0)) continue;
        const double diff = rendered.depth.at(y, x) - frame.depth.at(y, x);
        og.d_depth.at(y, x) = scale * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
      }
  }
  if (has_sem && !sl.no_valid_pixels) {
    og.has_sem = true;
    og.d_sem = Image(w, h, 1, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < frame.semantic_mask.size(); ++i)
      if (frame.semantic_mask.data()[i] != 0.0) ++n;
    const double scale = frame_weight * weights.w_sem / static_cast<double>(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (frame.semantic_mask.at(y, x) == 0.0) continue;
        const double diff = rendered.semantic.at(y, x) - frame.semantic.at(y, x);
        og.d_sem.at(y, x) = scale * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
      }
  }

  std::vector<Grad2D> splat_grads;
  backward_frame_2d(prep, frame.intrinsics, cfg.render, og, splat_grads);

  parallel_for(prep.splats.size(), cfg.render.threads, [&](std::size_t si) {
    const Grad2D& g2 = splat_grads[si];
    if (!g2.touched) return;
    const SplattedGaussian& s = prep.splats[si];
    chain_to_params(s, g2, (*params)[s.index], frame.intrinsics, frame.pose,
                    (*grads)[s.index]);
  });
  return out;
}

static LossBreakdown loss_impl(const ParamSet& params,
                               std::span<const TargetFrame> frames,
                               const LossWeights& weights, const FitConfig& cfg,
                               ParamSet* grads) {
  weights.validate();
  cfg.validate();
  if (frames.empty()) throw input_error("loss: need at least one frame");
  if (params.empty()) throw input_error("loss: empty parameter set");
  if (grads) grads->assign(params.size(), ParamBlock{Vec3d::Zero(), Vec3d::Zero(),
                                                     Vec4d::Zero(), 0.0,
                                                     Vec3d::Zero(), 0.0});
  const auto values = values_from_params(params);
  const double fw = 1.0 / static_cast<double>(frames.size());

  LossBreakdown agg;
  for (const TargetFrame& frame : frames) {
    const FrameEval fe = eval_frame(values, frame, weights, cfg, fw, &params, grads);
    agg.rgb += fw * fe.bd.rgb;
    agg.depth += fw * fe.bd.depth;
    agg.sem += fw * fe.bd.sem;
    agg.mean_psnr += fw * fe.psnr_value;
    agg.depth_warning |= fe.bd.depth_warning;
    agg.sem_warning |= fe.bd.sem_warning;
  }
  agg.total = agg.rgb + weights.w_depth * agg.depth + weights.w_sem * agg.sem;
  return agg;
}

LossBreakdown total_loss(const ParamSet& params, std::span<const TargetFrame> frames,
                         const LossWeights& weights, const FitConfig& cfg) {
  return loss_impl(params, frames, weights, cfg, nullptr);
}

LossBreakdown loss_and_gradients(const ParamSet& params,
                                 std::span<const TargetFrame> frames,
                                 const LossWeights& weights, const FitConfig& cfg,
                                 ParamSet& grads) {
  return loss_impl(params, frames, weights, cfg, &grads);
}

ParamSet backward(const GaussianMap& map, std::span<const TargetFrame> frames,
                  const LossWeights& weights, const FitConfig& cfg) {
  const ParamSet params = params_from_map(map);
  ParamSet grads;
  loss_impl(params, frames, weights, cfg, &grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

namespace {

/// Flat views over the 15 scalars of a ParamBlock with their group rates.
struct ParamRef {
  double* value;
  double lr;
};

void collect_refs(ParamBlock& p, const FitConfig& cfg, ParamRef out[15]) {
  int k = 0;
  for (int i = 0; i < 3; ++i) out[k++] = {&p.mu[i], cfg.lr_mu};
  for (int i = 0; i < 3; ++i) out[k++] = {&p.log_scale[i], cfg.lr_log_scale};
  for (int i = 0; i < 4; ++i) out[k++] = {&p.quat[i], cfg.lr_quat};
  out[k++] = {&p.opacity_logit, cfg.lr_opacity};
  for (int i = 0; i < 3; ++i) out[k++] = {&p.color_logit[i], cfg.lr_color};
  out[k++] = {&p.semantic, cfg.lr_semantic};
}

}  // namespace

std::pair<GaussianMap, FitReport> fit_map(const GaussianMap& map,
                                          std::span<const TargetFrame> frames,
                                          const FitConfig& cfg,
                                          const LossWeights& weights) {
  cfg.validate();
  weights.validate();
  if (map.empty()) throw input_error("fit_map: empty map");
  if (frames.empty()) throw input_error("fit_map: need at least one frame");

  const auto t_start = std::chrono::steady_clock::now();

  ParamSet params = params_from_map(map);
  const std::size_t n = params.size();
  std::vector<std::array<double, 15>> adam_m(n), adam_v(n);
  for (std::size_t i = 0; i < n; ++i) {
    adam_m[i].fill(0.0);
    adam_v[i].fill(0.0);
  }

  FitReport report;
  report.iterations.reserve(cfg.iterations);
  double lr_scale = 1.0;
  double initial_total = 0.0;
  ParamSet grads;

  for (int it = 0; it < cfg.iterations; ++it) {
    const LossBreakdown bd = loss_and_gradients(params, frames, weights, cfg, grads);
    if (it == 0) {
      initial_total = bd.total;
    } else if (initial_total > 0.0 && bd.total > 10.0 * initial_total) {
      lr_scale *= 0.5;
      report.lr_halved_at.push_back(it);
    }
    report.iterations.push_back(
        {it, bd.rgb, bd.depth, bd.sem, bd.total, bd.mean_psnr});

    const double bc1 = 1.0 - std::pow(cfg.beta1, it + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, it + 1);
    for (std::size_t i = 0; i < n; ++i) {
      ParamRef refs[15], grefs[15];
      collect_refs(params[i], cfg, refs);
      collect_refs(grads[i], cfg, grefs);
      for (int k = 0; k < 15; ++k) {
        const double g = *grefs[k].value;
        double& m = adam_m[i][k];
        double& v = adam_v[i][k];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        const double step = refs[k].lr * lr_scale * (m / bc1) /
                            (std::sqrt(v / bc2) + cfg.adam_eps);
        *refs[k].value -= step;
      }
      // Re-project to valid domains.
      ParamBlock& p = params[i];
      p.quat /= p.quat.norm();
      p.opacity_logit = std::clamp(p.opacity_logit, -15.0, 15.0);
      for (int c = 0; c < 3; ++c)
        p.color_logit[c] = std::clamp(p.color_logit[c], -15.0, 15.0);
      for (int c = 0; c < 3; ++c)
        p.log_scale[c] = std::clamp(p.log_scale[c], std::log(1e-6), std::log(10.0));
    }
  }

  // Final quality metrics on the fitted parameters.
  const auto values = values_from_params(params);
  double psnr_sum = 0.0, depth_abs = 0.0, sem_abs = 0.0;
  std::size_t depth_n = 0, sem_n = 0;
  for (const TargetFrame& frame : frames) {
    const RenderedFrame r =
        render_values(values, frame.intrinsics, frame.pose, cfg.render);
    psnr_sum += psnr(r.rgb, frame.rgb);
    if (!frame.depth.empty())
      for (int y = 0; y < frame.depth.height(); ++y)
        for (int x = 0; x < frame.depth.width(); ++x)
          if (frame.depth.at(y, x) > 0.0) {
            depth_abs += std::abs(r.depth.at(y, x) - frame.depth.at(y, x));
            ++depth_n;
          }
    if (!frame.semantic.empty())
      for (int y = 0; y < frame.semantic.height(); ++y)
        for (int x = 0; x < frame.semantic.width(); ++x)
          if (frame.semantic_mask.at(y, x) != 0.0) {
            sem_abs += std::abs(r.semantic.at(y, x) - frame.semantic.at(y, x));
            ++sem_n;
          }
  }
  report.final_psnr = psnr_sum / static_cast<double>(frames.size());
  report.final_depth_mae = depth_n ? depth_abs / static_cast<double>(depth_n) : 0.0;
  report.final_sem_mae = sem_n ? sem_abs / static_cast<double>(sem_n) : 0.0;
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  return {map_from_params(params, map), std::move(report)};
}

std::string FitReport::to_json() const {
  nlohmann::json j;
  j["iterations"] = nlohmann::json::array();
  for (const IterationStats& s : iterations)
    j["iterations"].push_back({{"iteration", s.iteration},
                               {"loss_rgb", s.loss_rgb},
                               {"loss_depth", s.loss_depth},
                               {"loss_sem", s.loss_sem},
                               {"total", s.total},
                               {"psnr", s.psnr}});
  j["final_psnr"] = final_psnr;
  j["final_depth_mae"] = final_depth_mae;
  j["final_sem_mae"] = final_sem_mae;
  j["lr_halved_at"] = lr_halved_at;
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j.dump(2) + "\n";
}

}  // namespace gsmap
